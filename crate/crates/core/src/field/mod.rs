//! The conditioned implicit field: positional encoding and sampled shape
//! embedding, concatenated and fed to a sine MLP.
//!
//! Spatial gradients are exact: encoding derivatives are closed form, the
//! MLP propagates three tangents, and the chain rule through coordinate
//! normalization is applied so gradients are per meter. Parameter gradients
//! of the training loss come from a reverse pass over that extended
//! (value + tangent) computation.

pub mod encoding;
pub mod mlp;
pub mod trilinear;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

pub use encoding::{positional_encode, PositionalEncodingConfig};
pub use mlp::{Activation, DenseLayer, MlpGrad, MlpParameters};
pub use trilinear::{trilinear_backprop, trilinear_sample, Neighbor, SamplingMode};

use crate::error::{LodeError, Result};
use crate::grid::{GridConfig, Vec3};
use crate::loss::{self, LossBreakdown, LossWeights, SampleBatch};
use crate::sparse::SparseTensor;

/// Points per evaluation chunk; bounds tape memory.
pub const EVAL_CHUNK: usize = 2048;

/// Whether spatial gradients hold the embedding fixed (`Partial`) or also
/// differentiate the trilinear map (`Total`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMode {
    Partial,
    Total,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitField {
    pub grid: GridConfig,
    /// Shape embedding volume; `None` for unconditioned baselines.
    pub embeddings: Option<SparseTensor>,
    pub pe: PositionalEncodingConfig,
    pub sdf_mlp: MlpParameters,
    pub semantic_mlp: Option<MlpParameters>,
    pub grad_mode: GradMode,
    pub sampling: SamplingMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub value: f64,
    pub spatial_grad: Vec3,
    pub embedding: Vec<f64>,
    pub semantic_logits: Option<Vec<f64>>,
}

/// Gradients of the training loss w.r.t. field parameters and embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub sdf: MlpGrad,
    pub semantic: Option<MlpGrad>,
    pub embedding: Option<Array2<f64>>,
}

struct Inputs {
    z: Array2<f64>,
    t: Option<[Array2<f64>; 3]>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl ImplicitField {
    pub fn embedding_width(&self) -> usize {
        self.embeddings.as_ref().map(|e| e.channels()).unwrap_or(0)
    }

    pub fn input_width(&self) -> usize {
        self.pe.width() + self.embedding_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sdf_mlp.inputs() != self.input_width() {
            return Err(LodeError::ChannelMismatch { expected: self.input_width(), got: self.sdf_mlp.inputs() });
        }
        if self.sdf_mlp.outputs() != 1 {
            return Err(LodeError::Config("sdf head must have one output".into()));
        }
        if let Some(sem) = &self.semantic_mlp {
            if sem.inputs() != self.input_width() {
                return Err(LodeError::ChannelMismatch { expected: self.input_width(), got: sem.inputs() });
            }
        }
        Ok(())
    }

    fn build_inputs(&self, xs: &[Vec3], tangents: bool) -> Result<Inputs> {
        let pe_w = self.pe.width();
        let m = self.input_width();
        let b = xs.len();
        let mut z = Array2::zeros((b, m));
        let mut t = if tangents { Some([0, 1, 2].map(|_| Array2::zeros((b, m)))) } else { None };
        let mut neighbors = Vec::with_capacity(b);
        let inv_half = self.grid.half_extent().map(|h| 1.0 / h);
        for (i, x) in xs.iter().enumerate() {
            if !self.grid.contains_point(x) {
                return Err(LodeError::OutsideBox { x: x[0], y: x[1], z: x[2] });
            }
            let u = self.grid.normalize(x);
            let (enc, jac) = encoding::encode_with_derivative(&u, &self.pe);
            z.slice_mut(s![i, ..pe_w]).iter_mut().zip(&enc).for_each(|(d, v)| *d = *v);
            if let Some(t) = t.as_mut() {
                for (f, &(axis, d)) in jac.iter().enumerate() {
                    t[axis][[i, f]] = d * inv_half[axis];
                }
            }
            if let Some(v_se) = &self.embeddings {
                let nb = trilinear::sample_neighbors(v_se, &self.grid, x, self.sampling)?;
                for n in &nb {
                    let row = v_se.features.row(n.row);
                    for (c, &e) in row.iter().enumerate() {
                        z[[i, pe_w + c]] += n.weight * e;
                    }
                    if let (Some(t), GradMode::Total) = (t.as_mut(), self.grad_mode) {
                        for k in 0..3 {
                            let dw = n.dweight[k];
                            if dw != 0.0 {
                                for (c, &e) in row.iter().enumerate() {
                                    t[k][[i, pe_w + c]] += dw * e;
                                }
                            }
                        }
                    }
                }
                neighbors.push(nb);
            }
        }
        Ok(Inputs { z, t, neighbors })
    }

    /// Value, per-meter spatial gradient, sampled embedding and (when a
    /// semantic head is present) class logits at `x`.
    pub fn eval(&self, x: &Vec3) -> Result<FieldEval> {
        Ok(self.eval_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn eval_batch(&self, xs: &[Vec3]) -> Result<Vec<FieldEval>> {
        let mut out = Vec::with_capacity(xs.len());
        let pe_w = self.pe.width();
        for chunk in xs.chunks(EVAL_CHUNK) {
            let inp = self.build_inputs(chunk, true)?;
            let sem = self.semantic_mlp.as_ref().map(|m| m.forward_batch(&inp.z));
            let tape = self.sdf_mlp.forward_tangent(inp.z.clone(), inp.t.expect("tangents requested"));
            for i in 0..chunk.len() {
                out.push(FieldEval {
                    value: tape.output[[i, 0]],
                    spatial_grad: Vec3::new(tape.doutput[0][[i, 0]], tape.doutput[1][[i, 0]], tape.doutput[2][[i, 0]]),
                    embedding: inp.z.slice(s![i, pe_w..]).to_vec(),
                    semantic_logits: sem.as_ref().map(|s| s.row(i).to_vec()),
                });
            }
        }
        Ok(out)
    }

    /// Field values only, without gradients.
    pub fn values(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(EVAL_CHUNK) {
            let inp = self.build_inputs(chunk, false)?;
            out.extend(self.sdf_mlp.forward_batch(&inp.z).column(0).iter().copied());
        }
        Ok(out)
    }

    /// Semantic logits from the parallel head at `x`.
    pub fn semantic_eval(&self, x: &Vec3) -> Result<Vec<f64>> {
        Ok(self.semantic_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn semantic_batch(&self, xs: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        let head = self.semantic_mlp.as_ref().ok_or(LodeError::NoSemanticHead)?;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(EVAL_CHUNK) {
            let inp = self.build_inputs(chunk, false)?;
            let logits = head.forward_batch(&inp.z);
            out.extend(logits.rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    fn scatter_embedding_grad(
        &self,
        neighbors: &[Vec<Neighbor>],
        gz: &Array2<f64>,
        gt: Option<&[Array2<f64>; 3]>,
        acc: &mut Array2<f64>,
    ) {
        let pe_w = self.pe.width();
        let d_se = self.embedding_width();
        for (i, nb) in neighbors.iter().enumerate() {
            for n in nb {
                let mut row = acc.row_mut(n.row);
                for c in 0..d_se {
                    let mut g = n.weight * gz[[i, pe_w + c]];
                    if let Some(gt) = gt {
                        for k in 0..3 {
                            g += n.dweight[k] * gt[k][[i, pe_w + c]];
                        }
                    }
                    row[c] += g;
                }
            }
        }
    }
}

/// Loss breakdown (completion term left at zero) and exact gradients of the
/// weighted Eikonal, normal, on-surface, off-surface and semantic terms.
pub fn field_grad_params(field: &ImplicitField, batch: &SampleBatch, w: &LossWeights) -> Result<(LossBreakdown, FieldGrads)> {
    field.validate()?;
    if batch.on_points.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    if batch.on_normals.len() != batch.on_points.len() {
        return Err(LodeError::LengthMismatch { expected: batch.on_points.len(), got: batch.on_normals.len() });
    }
    let n_on = batch.on_points.len();
    let n_off = batch.off_points.len();
    let n_eik = (n_on + n_off) as f64;
    let points: Vec<Vec3> = batch.eikonal_points().copied().collect();

    let mut sdf_grad = field.sdf_mlp.zero_grad();
    let mut emb_grad = field.embeddings.as_ref().map(|e| Array2::zeros(e.features.dim()));
    let mut parts = LossBreakdown::default();

    let mut start = 0;
    for chunk in points.chunks(EVAL_CHUNK) {
        let b = chunk.len();
        let inp = field.build_inputs(chunk, true)?;
        let tape = field.sdf_mlp.forward_tangent(inp.z, inp.t.expect("tangents requested"));
        let mut g_val = Array2::zeros((b, 1));
        let mut g_dout = [0, 1, 2].map(|_| Array2::zeros((b, 1)));
        for i in 0..b {
            let gi = start + i;
            let value = tape.output[[i, 0]];
            let grad = Vec3::new(tape.doutput[0][[i, 0]], tape.doutput[1][[i, 0]], tape.doutput[2][[i, 0]]);
            let (eik, deik) = loss::eikonal_term(&grad);
            parts.eikonal += eik;
            let mut dg = deik * (w.eikonal / n_eik);
            if gi < n_on {
                let (nrm, dnrm) = loss::normal_term(&grad, &batch.on_normals[gi]);
                parts.normal += nrm;
                parts.surface += value.abs();
                dg += dnrm * (w.normal / n_on as f64);
                g_val[[i, 0]] = w.surface * value.signum() * (value != 0.0) as u8 as f64 / n_on as f64;
            } else {
                parts.off_surface += loss::psi(value, w.psi_alpha);
                g_val[[i, 0]] = w.off_surface * loss::psi_derivative(value, w.psi_alpha) / n_off as f64;
            }
            for k in 0..3 {
                g_dout[k][[i, 0]] = dg[k];
            }
        }
        let (g, gz, gt) = field.sdf_mlp.backward_tangent(&tape, &g_val, &g_dout);
        mlp::add_grad(&mut sdf_grad, &g);
        if let Some(acc) = emb_grad.as_mut() {
            let gt = (field.grad_mode == GradMode::Total).then_some(&gt);
            field.scatter_embedding_grad(&inp.neighbors, &gz, gt, acc);
        }
        start += b;
    }
    parts.eikonal /= n_eik;
    parts.normal /= n_on as f64;
    parts.surface /= n_on as f64;
    if n_off > 0 {
        parts.off_surface /= n_off as f64;
    }

    let mut sem_grad = None;
    if let (Some(head), Some(labeled)) = (&field.semantic_mlp, &batch.labeled) {
        if labeled.points.len() != labeled.labels.len() {
            return Err(LodeError::LengthMismatch { expected: labeled.points.len(), got: labeled.labels.len() });
        }
        if !labeled.points.is_empty() {
            let n_seg = labeled.points.len() as f64;
            let mut acc = head.zero_grad();
            let mut ce_sum = 0.0;
            let mut s0 = 0;
            for chunk in labeled.points.chunks(EVAL_CHUNK) {
                let inp = field.build_inputs(chunk, false)?;
                let tape = head.forward_cached(inp.z);
                let mut g_out = Array2::zeros(tape.output.dim());
                for i in 0..chunk.len() {
                    let logits = tape.output.row(i).to_vec();
                    let (ce, dl) = loss::cross_entropy_term(&logits, labeled.labels[s0 + i])?;
                    ce_sum += ce;
                    for (c, d) in dl.iter().enumerate() {
                        g_out[[i, c]] = w.semantic * d / n_seg;
                    }
                }
                let (g, gz) = head.backward_values(&tape, &g_out);
                mlp::add_grad(&mut acc, &g);
                if let Some(e) = emb_grad.as_mut() {
                    field.scatter_embedding_grad(&inp.neighbors, &gz, None, e);
                }
                s0 += chunk.len();
            }
            parts.semantic = ce_sum / n_seg;
            sem_grad = Some(acc);
        }
    }
    parts.recombine(w);
    if !parts.total.is_finite() {
        return Err(LodeError::NonFiniteLoss);
    }
    Ok((parts, FieldGrads { sdf: sdf_grad, semantic: sem_grad, embedding: emb_grad }))
}

/// Field evaluation as a free function.
pub fn field_eval(field: &ImplicitField, x: &Vec3) -> Result<FieldEval> {
    field.eval(x)
}

pub fn semantic_eval(field: &ImplicitField, x: &Vec3) -> Result<Vec<f64>> {
    field.semantic_eval(x)
}
