//! Flat `key = value` settings: built-in defaults, then a config file, then
//! `--key value` flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lode::data::LidarConfig;
use lode::encoder::{EncoderConfig, PruningPlacement};
use lode::extract::InferenceConfig;
use lode::field::{GradMode, PositionalEncodingConfig, SamplingMode};
use lode::loss::LossWeights;
use lode::sampler::SamplerConfig;
use lode::trainer::{ModelConfig, SemanticMode, TrainConfig, TrainMode};
use lode::GridConfig;

use crate::CliError;

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, help }
}

/// Keys that may be given more than once; values are joined with commas.
pub const LIST_KEYS: &[&str] = &["resolution", "vth"];

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "master seed"),
    key("threads", "0", "worker threads (0: all cores)"),
    key("run_name", "", "run directory name (default: <command>-seed<seed>)"),
    key("scenes", "50", "synth: number of scenes"),
    key("scene_kind", "desk", "synth: desk | sphere_plane"),
    key("gt_density", "100", "synth: ground-truth points per square meter"),
    key("lidar_channels", "64", "synth: LiDAR channels"),
    key("lidar_azimuth_step", "0.4", "synth: azimuth step, degrees"),
    key("lidar_noise", "0", "synth: range noise sigma, meters"),
    key("dataset", "", "dataset manifest path"),
    key("mode", "lode", "lode | siren | fourier"),
    key("semantic", "off", "off | a | b"),
    key("lr", "1e-4", "Adam learning rate"),
    key("adam_beta1", "0.9", "Adam beta1"),
    key("adam_beta2", "0.999", "Adam beta2"),
    key("adam_eps", "1e-8", "Adam epsilon"),
    key("epochs", "30", "passes over the dataset"),
    key("steps_per_scene", "1", "consecutive steps per scene visit"),
    key("max_steps", "", "stop after this many total steps"),
    key("resume", "", "checkpoint to resume training from"),
    key("cosine_decay", "false", "cosine learning-rate decay"),
    key("n_on", "16000", "on-surface samples per step"),
    key("n_off", "16000", "off-surface samples per step"),
    key("normal_k", "16", "neighbours for normal estimation"),
    key("reject_radius", "0", "off-surface rejection radius, meters"),
    key("grad_mode", "total", "partial | total"),
    key("lambda1", "3000", "Eikonal weight"),
    key("lambda2", "100", "normal weight"),
    key("lambda3", "100", "on-surface weight"),
    key("lambda4", "50", "off-surface weight"),
    key("lambda5", "100", "completion weight"),
    key("lambda6", "auto", "semantic weight (auto: 50 with --semantic b, else 0)"),
    key("psi_alpha", "100", "off-surface penalty sharpness"),
    key("hidden", "256", "MLP hidden width"),
    key("depth", "4", "MLP hidden layers"),
    key("omega_0", "30", "sine frequency scale"),
    key("pe", "true", "positional encoding on/off"),
    key("pe_levels", "10", "positional encoding octaves"),
    key("include_xyz", "false", "prepend raw coordinates to the encoding"),
    key("sampling", "trilinear", "trilinear | nearest"),
    key("enc_channels", "16,32,64,128,256", "encoder stage widths"),
    key("scale_size", "4", "embedding stride"),
    key("d_se", "256", "embedding channels"),
    key("pruning", "all", "all | last:<k>"),
    key("output_block_convs", "2", "output block convolutions"),
    key("prune_threshold", "0.5", "inference keep threshold"),
    key("checkpoint", "", "checkpoint file, or directory of per-scene baseline checkpoints"),
    key("scene", "", "complete: scene id in the dataset"),
    key("n_inf", "auto", "lattice points on the longest axis (auto: grid voxels)"),
    key("resolution", "", "complete: lattice resolutions (repeatable)"),
    key("vth", "0.1", "surface thresholds, meters (repeatable)"),
    key("mesh_out", "", "complete: output directory for meshes"),
    key("mesh_format", "ply", "ply | obj"),
    key("knn_k", "3", "neighbours for label transfer"),
    key("ablate", "", "eval: sampling | pe | shape | pruning"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl Settings {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::msg(format!("cannot read config {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::msg(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        match self.values.get_mut(k) {
            Some(slot) => {
                *slot = v.to_string();
                Ok(())
            }
            None => Err(CliError::msg(format!("unknown config key {k}"))),
        }
    }

    pub fn str(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {k}"))
    }

    pub fn opt(&self, k: &str) -> Option<&str> {
        Some(self.str(k)).filter(|s| !s.is_empty())
    }

    pub fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T, CliError> {
        let v = self.str(k);
        v.parse().map_err(|_| CliError::msg(format!("invalid value {v:?} for {k}")))
    }

    pub fn list<T: std::str::FromStr>(&self, k: &str) -> Result<Vec<T>, CliError> {
        self.str(k)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::msg(format!("invalid value {s:?} in {k}"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn lidar(&self) -> Result<LidarConfig, CliError> {
        Ok(LidarConfig {
            channels: self.parse("lidar_channels")?,
            azimuth_step_deg: self.parse("lidar_azimuth_step")?,
            noise_sigma: self.parse("lidar_noise")?,
            seed: self.seed()?,
            ..LidarConfig::default()
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let mode = match self.str("mode") {
            "lode" => TrainMode::Lode,
            "siren" => TrainMode::SirenBaseline,
            "fourier" => TrainMode::FourierBaseline,
            m => return Err(CliError::msg(format!("unknown mode {m} (lode | siren | fourier)"))),
        };
        let semantic = match self.str("semantic") {
            "off" => SemanticMode::Off,
            "a" => SemanticMode::A,
            "b" => SemanticMode::B,
            s => return Err(CliError::msg(format!("unknown semantic mode {s} (off | a | b)"))),
        };
        let grad_mode = match self.str("grad_mode") {
            "partial" => GradMode::Partial,
            "total" => GradMode::Total,
            g => return Err(CliError::msg(format!("unknown grad_mode {g} (partial | total)"))),
        };
        let sampling = match self.str("sampling") {
            "trilinear" => SamplingMode::Trilinear,
            "nearest" => SamplingMode::Nearest,
            s => return Err(CliError::msg(format!("unknown sampling {s} (trilinear | nearest)"))),
        };
        let semantic_weight = match self.str("lambda6") {
            "auto" => {
                if semantic == SemanticMode::B {
                    LossWeights::with_semantics().semantic
                } else {
                    0.0
                }
            }
            _ => self.parse("lambda6")?,
        };
        let mut encoder = EncoderConfig::with_scale(self.list("enc_channels")?, self.parse("scale_size")?, self.parse("d_se")?)?;
        encoder.pruning_placement = parse_pruning(self.str("pruning"))?;
        encoder.output_block_convs = self.parse("output_block_convs")?;
        encoder.prune_threshold = self.parse("prune_threshold")?;
        let cfg = TrainConfig {
            learning_rate: self.parse("lr")?,
            adam_beta1: self.parse("adam_beta1")?,
            adam_beta2: self.parse("adam_beta2")?,
            adam_eps: self.parse("adam_eps")?,
            steps_per_scene: self.parse("steps_per_scene")?,
            epochs: self.parse("epochs")?,
            seed: self.seed()?,
            grad_mode,
            weights: LossWeights {
                eikonal: self.parse("lambda1")?,
                normal: self.parse("lambda2")?,
                surface: self.parse("lambda3")?,
                off_surface: self.parse("lambda4")?,
                completion: self.parse("lambda5")?,
                semantic: semantic_weight,
                psi_alpha: self.parse("psi_alpha")?,
            },
            sampler: SamplerConfig {
                n_on: self.parse("n_on")?,
                n_off: self.parse("n_off")?,
                seed: self.seed()?,
                normal_k: self.parse("normal_k")?,
                reject_radius: self.parse("reject_radius")?,
            },
            mode,
            cosine_decay: self.parse("cosine_decay")?,
            model: ModelConfig {
                encoder,
                pe: PositionalEncodingConfig {
                    enabled: self.parse("pe")?,
                    levels: self.parse("pe_levels")?,
                    include_xyz: self.parse("include_xyz")?,
                },
                hidden: self.parse("hidden")?,
                depth: self.parse("depth")?,
                omega_0: self.parse("omega_0")?,
                sampling,
                semantic,
                num_classes: lode::data::SYNTH_CLASSES,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lattice resolution; `auto` is the grid's longest voxel count.
    pub fn n_inf(&self, grid: &GridConfig) -> Result<usize, CliError> {
        match self.str("n_inf") {
            "auto" => Ok(*grid.dims.iter().max().expect("three dims")),
            _ => self.parse("n_inf"),
        }
    }

    pub fn inference(&self, grid: &GridConfig) -> Result<InferenceConfig, CliError> {
        let vth = self.list::<f64>("vth")?;
        let cfg = InferenceConfig {
            n_inf: self.n_inf(grid)?,
            v_th: *vth.first().ok_or_else(|| CliError::msg("vth needs at least one value"))?,
            ..InferenceConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_pruning(s: &str) -> Result<PruningPlacement, CliError> {
    if s == "all" {
        return Ok(PruningPlacement::All);
    }
    s.strip_prefix("last:")
        .and_then(|k| k.parse().ok())
        .map(PruningPlacement::Last)
        .ok_or_else(|| CliError::msg(format!("invalid pruning {s:?} (all | last:<k>)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_reference_constants() {
        let cfg = Settings::default().train().unwrap();
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.sampler.n_on, 16000);
        assert_eq!(cfg.model.pe.levels, 10);
        assert_eq!(cfg.model.encoder, EncoderConfig::default());
    }

    #[test]
    fn semantic_b_switches_lambda6_on() {
        let mut s = Settings::default();
        s.set("semantic", "b").unwrap();
        assert_eq!(s.train().unwrap().weights.semantic, 50.0);
        s.set("lambda6", "7").unwrap();
        assert_eq!(s.train().unwrap().weights.semantic, 7.0);
    }

    #[test]
    fn bad_values_are_reported() {
        let mut s = Settings::default();
        assert!(s.set("nope", "1").is_err());
        s.set("mode", "other").unwrap();
        assert!(s.train().is_err());
        let mut s = Settings::default();
        s.set("pruning", "last:x").unwrap();
        assert!(s.train().is_err());
        s.set("pruning", "last:2").unwrap();
        assert_eq!(s.train().unwrap().model.encoder.pruning_placement, PruningPlacement::Last(2));
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "# comment\nlr = 0.01\nhidden=32  # trailing\n\n").unwrap();
        let mut s = Settings::default();
        s.apply_file(&p).unwrap();
        s.set("hidden", "16").unwrap();
        let cfg = s.train().unwrap();
        assert_eq!((cfg.learning_rate, cfg.model.hidden), (0.01, 16));
        fs::write(&p, "lr 0.01\n").unwrap();
        assert!(Settings::default().apply_file(&p).is_err());
    }
}
