//! Model assembly, the optimization loop and checkpoints.
//!
//! One scene per optimizer step. Parameters and Adam moments are kept at f32
//! precision after initialization and after every update, so a checkpoint
//! stores the full optimizer state losslessly. Per-step randomness is derived
//! from `(seed, step)`, which makes resumed runs replay the uninterrupted run.

mod adam;
mod checkpoint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SectionData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{SceneRecord, SYNTH_CLASSES};
use crate::encoder::{completion_loss_grad, EncoderConfig, SparseEncoder};
use crate::error::{LodeError, Result};
use crate::field::mlp::flatten_layers;
use crate::field::{field_grad_params, GradMode, ImplicitField, MlpParameters, PositionalEncodingConfig, SamplingMode};
use crate::grid::{voxelize, GridConfig, PointCloud};
use crate::loss::{LossBreakdown, LossWeights};
use crate::sampler::{estimate_normals, sample_batch, SamplerConfig};
use crate::sparse::SparseTensor;

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Lode,
    SirenBaseline,
    FourierBaseline,
}

/// `A` transfers labels from the input by KNN at inference; `B` trains a
/// semantic head next to the SDF head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    Off,
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pe: PositionalEncodingConfig,
    pub hidden: usize,
    /// Hidden layers.
    pub depth: usize,
    pub omega_0: f64,
    pub sampling: SamplingMode,
    pub semantic: SemanticMode,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pe: PositionalEncodingConfig::default(),
            hidden: 256,
            depth: 4,
            omega_0: 30.0,
            sampling: SamplingMode::Trilinear,
            semantic: SemanticMode::Off,
            num_classes: SYNTH_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps_per_scene: u64,
    pub epochs: u64,
    pub seed: u64,
    pub grad_mode: GradMode,
    pub weights: LossWeights,
    pub sampler: SamplerConfig,
    pub mode: TrainMode,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps_per_scene: 1,
            epochs: 30,
            seed: 0,
            grad_mode: GradMode::Total,
            weights: LossWeights::default(),
            sampler: SamplerConfig::default(),
            mode: TrainMode::Lode,
            cosine_decay: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LodeError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(LodeError::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.steps_per_scene == 0 {
            return Err(LodeError::Config("steps_per_scene must be at least 1".into()));
        }
        let m = &self.model;
        if m.hidden == 0 || m.depth == 0 {
            return Err(LodeError::Config("mlp hidden width and depth must be at least 1".into()));
        }
        if m.pe.enabled && m.pe.levels == 0 {
            return Err(LodeError::Config("positional encoding needs at least one level".into()));
        }
        if m.semantic == SemanticMode::B && m.num_classes < 2 {
            return Err(LodeError::Config("semantic head needs at least two classes".into()));
        }
        if self.mode == TrainMode::Lode {
            m.encoder.validate()?;
        }
        self.weights.validate()?;
        self.sampler.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    /// Learning rate used at `step` of a run of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if self.cosine_decay && total > 0 {
            let frac = step as f64 / total as f64;
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.learning_rate
        }
    }
}

/// SplitMix64 finalizer over `(seed, step, stream)`.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Every trainable parameter of one formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LodeModel {
    pub mode: TrainMode,
    pub config: ModelConfig,
    pub grad_mode: GradMode,
    pub encoder: Option<SparseEncoder>,
    pub sdf: MlpParameters,
    pub semantic: Option<MlpParameters>,
}

impl LodeModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, INIT_STREAM));
        let encoder = match cfg.mode {
            TrainMode::Lode => Some(SparseEncoder::new(mc.encoder.clone(), &mut rng)?),
            _ => None,
        };
        let pe = Self::pe_for(cfg.mode, &mc.pe);
        let inputs = pe.width() + encoder.as_ref().map(|e| e.cfg.d_se).unwrap_or(0);
        let sdf = match cfg.mode {
            TrainMode::FourierBaseline => MlpParameters::new_relu(inputs, mc.hidden, mc.depth, 1, &mut rng),
            _ => MlpParameters::new_sine(inputs, mc.hidden, mc.depth, 1, mc.omega_0, &mut rng),
        };
        let semantic = (mc.semantic == SemanticMode::B)
            .then(|| MlpParameters::new_sine(inputs, mc.hidden, mc.depth, mc.num_classes, mc.omega_0, &mut rng));
        let mut model = Self { mode: cfg.mode, config: mc.clone(), grad_mode: cfg.grad_mode, encoder, sdf, semantic };
        let mut flat = model.flat();
        round_f32(&mut flat);
        model.set_flat(&flat)?;
        Ok(model)
    }

    fn pe_for(mode: TrainMode, pe: &PositionalEncodingConfig) -> PositionalEncodingConfig {
        match mode {
            TrainMode::SirenBaseline => PositionalEncodingConfig::disabled(),
            TrainMode::FourierBaseline => PositionalEncodingConfig { enabled: true, ..*pe },
            TrainMode::Lode => *pe,
        }
    }

    pub fn pe(&self) -> PositionalEncodingConfig {
        Self::pe_for(self.mode, &self.config.pe)
    }

    /// Encoder, SDF head and semantic head sizes, in flat order.
    pub fn group_sizes(&self) -> [usize; 3] {
        [
            self.encoder.as_ref().map(|e| e.num_params()).unwrap_or(0),
            self.sdf.num_params(),
            self.semantic.as_ref().map(|s| s.num_params()).unwrap_or(0),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.group_sizes().iter().sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.encoder.as_ref().map(|e| e.flat()).unwrap_or_default();
        v.extend(self.sdf.flat());
        if let Some(s) = &self.semantic {
            v.extend(s.flat());
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(LodeError::LengthMismatch { expected: self.num_params(), got: v.len() });
        }
        let [ne, ns, _] = self.group_sizes();
        if let Some(e) = self.encoder.as_mut() {
            e.set_flat(&v[..ne]);
        }
        self.sdf.set_flat(&v[ne..ne + ns]);
        if let Some(s) = self.semantic.as_mut() {
            s.set_flat(&v[ne + ns..]);
        }
        Ok(())
    }

    /// Field over `grid` conditioned on `embeddings` (`None` for baselines).
    pub fn field(&self, grid: GridConfig, embeddings: Option<SparseTensor>) -> ImplicitField {
        ImplicitField {
            grid,
            embeddings,
            pe: self.pe(),
            sdf_mlp: self.sdf.clone(),
            semantic_mlp: self.semantic.clone(),
            grad_mode: self.grad_mode,
            sampling: self.config.sampling,
        }
    }

    /// Inference-mode shape embeddings of an input cloud; `None` for baselines.
    pub fn embed(&self, input: &PointCloud, grid: &GridConfig) -> Result<Option<SparseTensor>> {
        match &self.encoder {
            Some(enc) => {
                let occ = voxelize(input, grid)?;
                if occ.is_empty() {
                    return Err(LodeError::EmptyInput);
                }
                Ok(Some(enc.encode(&SparseTensor::from_occupancy(&occ), grid, None)?.0))
            }
            None => Ok(None),
        }
    }

    /// Completed field for an input cloud. Baselines return their per-scene
    /// fit and ignore the input.
    pub fn infer(&self, input: &PointCloud, grid: &GridConfig) -> Result<ImplicitField> {
        let field = self.field(*grid, self.embed(input, grid)?);
        field.validate()?;
        Ok(field)
    }
}

/// A scene with its training inputs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene<'a> {
    pub record: &'a SceneRecord,
    /// Occupancy of the input cloud (LODE mode only).
    pub v_occ: Option<SparseTensor>,
    /// Surface points with normals the batches are drawn from.
    pub surface: PointCloud,
}

/// Drops scenes that cannot be trained on, with a warning: empty ground
/// truth, an empty input, or (baselines) too few input points for normals.
pub fn prepare<'a>(dataset: &'a [SceneRecord], cfg: &TrainConfig) -> Result<Vec<PreparedScene<'a>>> {
    let mut out = Vec::new();
    for rec in dataset {
        if rec.gt_occ.is_empty() || !rec.gt_cloud.points.iter().any(|p| rec.grid.contains_point(p)) {
            log::warn!("scene {}: empty ground truth, skipped", rec.id);
            continue;
        }
        match cfg.mode {
            TrainMode::Lode => {
                let occ = voxelize(&rec.input_cloud, &rec.grid)?;
                if occ.is_empty() {
                    log::warn!("scene {}: empty input, skipped", rec.id);
                    continue;
                }
                out.push(PreparedScene { record: rec, v_occ: Some(SparseTensor::from_occupancy(&occ)), surface: rec.gt_cloud.clone() });
            }
            _ => {
                let k = cfg.sampler.normal_k;
                if rec.input_cloud.len() <= k {
                    log::warn!("scene {}: {} input points, too few for normal estimation, skipped", rec.id, rec.input_cloud.len());
                    continue;
                }
                let surface = estimate_normals(&rec.input_cloud, k, &rec.sensor)?.valid_cloud();
                if surface.is_empty() {
                    log::warn!("scene {}: no valid input normals, skipped", rec.id);
                    continue;
                }
                out.push(PreparedScene { record: rec, v_occ: None, surface });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub scene_id: String,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        self.loss.csv_line(self.step, &self.scene_id)
    }
}

/// Serialized alongside the parameters. Randomness is re-derived from the
/// seed and step, so these counters are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    adam_t: u64,
    skipped: u64,
    rng_seed: u64,
}

/// Optimizer state for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: LodeModel,
    pub adam: AdamState,
    /// Steps taken so far, including skipped ones.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = LodeModel::new(&cfg)?;
        let adam = AdamState::new(model.num_params());
        Ok(Self { cfg, model, adam, step: 0 })
    }

    pub fn total_steps(&self, n_scenes: usize) -> u64 {
        self.cfg.epochs * n_scenes as u64 * self.cfg.steps_per_scene
    }

    /// Trains until the configured schedule is done or `stop_at` steps have
    /// been taken, calling `on_step` after every step.
    pub fn run(&mut self, scenes: &[PreparedScene], stop_at: Option<u64>, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        if scenes.is_empty() {
            return Err(LodeError::EmptyInput);
        }
        let total = self.total_steps(scenes.len());
        let end = stop_at.map_or(total, |s| s.min(total));
        while self.step < end {
            let idx = ((self.step / self.cfg.steps_per_scene) % scenes.len() as u64) as usize;
            let row = self.train_step(&scenes[idx], total)?;
            on_step(&row);
        }
        Ok(())
    }

    fn train_step(&mut self, scene: &PreparedScene, total: u64) -> Result<LogRow> {
        let rec = scene.record;
        let w = self.cfg.weights;
        let sampler = SamplerConfig { seed: derive_seed(self.cfg.seed, self.step, SAMPLE_STREAM), ..self.cfg.sampler.clone() };
        let labels = self.model.semantic.is_some() && scene.surface.labels.is_some();
        let batch = sample_batch(&scene.surface, &rec.grid, &sampler, labels)?;

        let outcome = match (&self.model.encoder, &scene.v_occ) {
            (Some(enc), Some(v_occ)) => {
                let tape = enc.forward(v_occ, &rec.grid, Some(&rec.gt_occ))?;
                let field = self.model.field(rec.grid, Some(tape.v_se.clone()));
                match field_grad_params(&field, &batch, &w) {
                    Ok((mut parts, fg)) => {
                        let sup = tape.sup.as_ref().ok_or_else(|| LodeError::Config("encoder produced no supervision".into()))?;
                        let (lc, mut gl) = completion_loss_grad(sup)?;
                        gl.iter_mut().flatten().for_each(|g| *g *= w.completion);
                        parts.completion = lc;
                        parts.recombine(&w);
                        let eg = enc.backward(&tape, fg.embedding.as_ref(), &gl)?;
                        let mut grads = eg.flat();
                        grads.extend(flatten_layers(&fg.sdf));
                        Some((parts, grads, fg.semantic))
                    }
                    Err(LodeError::NonFiniteLoss) => None,
                    Err(e) => return Err(e),
                }
            }
            (None, _) => {
                let field = self.model.field(rec.grid, None);
                match field_grad_params(&field, &batch, &w) {
                    Ok((parts, fg)) => Some((parts, flatten_layers(&fg.sdf), fg.semantic)),
                    Err(LodeError::NonFiniteLoss) => None,
                    Err(e) => return Err(e),
                }
            }
            (Some(_), None) => return Err(LodeError::Config(format!("scene {} was not prepared for LODE training", rec.id))),
        };

        let parts = match outcome {
            Some((parts, mut grads, sem)) => {
                if let Some(head) = &self.model.semantic {
                    match sem {
                        Some(g) => grads.extend(flatten_layers(&g)),
                        None => grads.extend(std::iter::repeat_n(0.0, head.num_params())),
                    }
                }
                let lr = self.cfg.lr_at(self.step, total);
                let mut params = self.model.flat();
                if adam_step(&mut params, &grads, &mut self.adam, lr, &self.cfg.adam())? {
                    round_f32(&mut params);
                    round_f32(&mut self.adam.m);
                    round_f32(&mut self.adam.v);
                    self.model.set_flat(&params)?;
                }
                parts
            }
            None => {
                self.adam.skipped += 1;
                log::warn!("step {}: non-finite loss on scene {}, skipped", self.step, rec.id);
                LossBreakdown { total: f64::NAN, ..LossBreakdown::default() }
            }
        };
        let row = LogRow { step: self.step, scene_id: rec.id.clone(), loss: parts };
        self.step += 1;
        Ok(row)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::default();
        c.push_bytes("config", serde_json::to_vec(&self.cfg)?);
        let state = TrainState { step: self.step, adam_t: self.adam.t, skipped: self.adam.skipped, rng_seed: self.cfg.seed };
        c.push_bytes("state", serde_json::to_vec(&state)?);
        let pe = self.model.pe();
        c.push_vector("pe", &[pe.enabled as u8 as f64, pe.levels as f64, pe.include_xyz as u8 as f64]);
        if let Some(e) = &self.model.encoder {
            c.push_vector("encoder", &e.flat());
        }
        c.push_vector("sdf_mlp", &self.model.sdf.flat());
        if let Some(s) = &self.model.semantic {
            c.push_vector("semantic_mlp", &s.flat());
        }
        c.push_vector("adam_m", &self.adam.m);
        c.push_vector("adam_v", &self.adam.v);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(c.bytes("config")?)?;
        let state: TrainState = serde_json::from_slice(c.bytes("state")?)?;
        let mut t = Self::new(cfg)?;
        let widen = |name: &str| -> Result<Vec<f64>> { Ok(c.tensor(name)?.iter().map(|&v| v as f64).collect()) };
        let mut flat = Vec::new();
        if t.model.encoder.is_some() {
            flat.extend(widen("encoder")?);
        } else if c.has("encoder") {
            return Err(LodeError::Config("checkpoint has encoder weights but the mode has no encoder".into()));
        }
        flat.extend(widen("sdf_mlp")?);
        if t.model.semantic.is_some() {
            flat.extend(widen("semantic_mlp")?);
        }
        t.model.set_flat(&flat)?;
        let n = t.model.num_params();
        let (m, v) = (widen("adam_m")?, widen("adam_v")?);
        if m.len() != n || v.len() != n {
            return Err(LodeError::LengthMismatch { expected: n, got: m.len().min(v.len()) });
        }
        t.adam = AdamState { m, v, t: state.adam_t, skipped: state.skipped };
        t.step = state.step;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    /// Ids of scenes left out by [`prepare`].
    pub skipped_scenes: Vec<String>,
}

/// Trains from initialization over the whole schedule.
pub fn fit(dataset: &[SceneRecord], cfg: &TrainConfig) -> Result<FitOutput> {
    if dataset.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let scenes = prepare(dataset, cfg)?;
    let kept: Vec<&str> = scenes.iter().map(|s| s.record.id.as_str()).collect();
    let skipped_scenes = dataset.iter().filter(|r| !kept.contains(&r.id.as_str())).map(|r| r.id.clone()).collect();
    let mut log = Vec::new();
    if !scenes.is_empty() {
        trainer.run(&scenes, None, |r| log.push(r.clone()))?;
    }
    Ok(FitOutput { trainer, log, skipped_scenes })
}
