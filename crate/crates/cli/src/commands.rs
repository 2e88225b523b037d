//! The four workflows: synth, train, complete, eval.

use std::path::{Path, PathBuf};

use lode::data::{benchmark_specs, sphere_plane_spec, DatasetManifest, ManifestEntry, SceneRecord};
use lode::extract::{
    evaluate_grid, evaluate_scene, evaluate_semantics, extract_surface_points, knn_label_transfer, marching_cubes, predict_labels,
    sweep_csv, threshold_sweep, InferenceConfig, TriangleMesh,
};
use lode::field::ImplicitField;
use lode::loss::LossBreakdown;
use lode::ply::{write_ply_to, PlyFormat};
use lode::trainer::{fit, prepare, LodeModel, SemanticMode, TrainConfig, TrainMode, Trainer};

use crate::config::Settings;
use crate::run::Run;
use crate::CliError;

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const CHECKPOINT: &str = "checkpoint.lode";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn synth(s: &Settings, run: &mut Run) -> Result<(), CliError> {
    let n: usize = s.parse("scenes")?;
    if n == 0 {
        return Err(CliError::msg("scenes must be at least 1"));
    }
    let seed = s.seed()?;
    let specs = match s.str("scene_kind") {
        "desk" => benchmark_specs(n, seed),
        "sphere_plane" => (0..n as u64).map(|i| sphere_plane_spec(seed.wrapping_add(i))).collect(),
        k => return Err(CliError::msg(format!("unknown scene_kind {k} (desk | sphere_plane)"))),
    };
    let mut scenes = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("scene_{i:03}");
        let rel = format!("scenes/{id}.json");
        run.write(&rel, &json(spec)?)?;
        scenes.push(ManifestEntry { id, spec: Some(PathBuf::from(rel)), points: None, occupancy: None, labels: None });
    }
    let manifest = DatasetManifest { gt_density: s.parse("gt_density")?, lidar: s.lidar()?, scenes };
    run.write(DATASET_MANIFEST, &json(&manifest)?)?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| CliError::msg(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn load_manifest(s: &Settings) -> Result<(DatasetManifest, PathBuf), CliError> {
    let path = s.opt("dataset").ok_or_else(|| CliError::msg("missing --dataset"))?;
    let path = Path::new(path);
    if !path.exists() {
        return Err(CliError::msg(format!("dataset {} not found", path.display())));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((DatasetManifest::load(path)?, root))
}

fn load_dataset(s: &Settings) -> Result<Vec<SceneRecord>, CliError> {
    let (m, root) = load_manifest(s)?;
    Ok(m.load_records(&root)?)
}

fn csv_log(rows: &[String]) -> Vec<u8> {
    let mut out = String::from(LossBreakdown::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out.into_bytes()
}

pub fn train(s: &Settings, run: &mut Run) -> Result<(), CliError> {
    let cfg = s.train()?;
    let records = load_dataset(s)?;
    let max_steps: Option<u64> = s.opt("max_steps").map(|_| s.parse("max_steps")).transpose()?;
    let mut rows = Vec::new();
    if cfg.mode == TrainMode::Lode {
        let mut trainer = match s.opt("resume") {
            Some(p) => Trainer::load(Path::new(p))?,
            None => Trainer::new(cfg.clone())?,
        };
        let scenes = prepare(&records, &trainer.cfg)?;
        if scenes.is_empty() {
            return Err(CliError::msg("no trainable scenes in the dataset"));
        }
        trainer.run(&scenes, max_steps, |r| rows.push(r.csv_line()))?;
        run.write(CHECKPOINT, &trainer.to_checkpoint()?.to_bytes())?;
    } else {
        if s.opt("resume").is_some() {
            return Err(CliError::msg("resume is only supported in lode mode"));
        }
        // baselines are fitted to each scene on its own
        for rec in &records {
            let out = fit(std::slice::from_ref(rec), &cfg)?;
            if !out.skipped_scenes.is_empty() {
                continue;
            }
            rows.extend(out.log.iter().map(|r| r.csv_line()));
            run.write(&format!("{CHECKPOINT_DIR}/{}.lode", rec.id), &out.trainer.to_checkpoint()?.to_bytes())?;
        }
    }
    run.write(TRAIN_LOG, &csv_log(&rows))?;
    Ok(())
}

/// A single checkpoint file, or a directory of per-scene baseline checkpoints.
fn model_for(checkpoint: &Path, scene_id: &str) -> Result<LodeModel, CliError> {
    let path = if checkpoint.is_dir() { checkpoint.join(format!("{scene_id}.lode")) } else { checkpoint.to_path_buf() };
    if !path.exists() {
        return Err(CliError::msg(format!("checkpoint {} not found", path.display())));
    }
    Ok(Trainer::load(&path)?.model)
}

/// Labels for `points` under the model's semantic mode, if any.
fn labels_for(model: &LodeModel, field: &ImplicitField, rec: &SceneRecord, points: &[lode::Vec3], k: usize) -> Result<Option<Vec<u16>>, CliError> {
    match model.config.semantic {
        SemanticMode::Off => Ok(None),
        SemanticMode::B => Ok(Some(predict_labels(field, points)?)),
        SemanticMode::A => {
            if rec.input_cloud.labels.is_none() {
                return Err(CliError::msg(format!("scene {} has no input labels for label transfer", rec.id)));
            }
            if points.is_empty() {
                return Ok(Some(Vec::new()));
            }
            Ok(Some(knn_label_transfer(&rec.input_cloud, points, k)?))
        }
    }
}

pub fn complete(s: &Settings, run: &mut Run) -> Result<(), CliError> {
    let checkpoint = PathBuf::from(s.opt("checkpoint").ok_or_else(|| CliError::msg("missing --checkpoint"))?);
    let (manifest, root) = load_manifest(s)?;
    let id = s.opt("scene").ok_or_else(|| CliError::msg("missing --scene"))?;
    let entry = manifest.scenes.iter().find(|e| e.id == id).ok_or_else(|| CliError::msg(format!("scene {id} not in dataset")))?;
    let rec = manifest.load_entry(entry, &root)?;
    let mut resolutions: Vec<usize> = s.list("resolution")?;
    if resolutions.is_empty() {
        resolutions.push(s.n_inf(&rec.grid)?);
    }
    if let Some(r) = resolutions.iter().find(|&&r| r < 2) {
        return Err(CliError::msg(format!("resolution must be at least 2, got {r}")));
    }
    let vths: Vec<f64> = s.list("vth")?;
    let base = s.inference(&rec.grid)?;
    let model = model_for(&checkpoint, id)?;
    let field = model.infer(&rec.input_cloud, &rec.grid)?;
    let mesh_dir = s.opt("mesh_out").map(PathBuf::from);
    let ext = match s.str("mesh_format") {
        f @ ("ply" | "obj") => f,
        f => return Err(CliError::msg(format!("unknown mesh_format {f} (ply | obj)"))),
    };
    let k: usize = s.parse("knn_k")?;
    let mut report = String::from("resolution,v_th,points,iou\n");
    for &n in &resolutions {
        let sdf = evaluate_grid(&field, &InferenceConfig { n_inf: n, ..base })?;
        let mut pts = extract_surface_points(&sdf, base.v_th)?;
        if let Some(l) = labels_for(&model, &field, &rec, &pts.points, k)? {
            pts = pts.with_labels(l)?;
        }
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &pts, PlyFormat::BinaryLittleEndian)?;
        run.write(&format!("points_n{n}.ply"), &buf)?;

        let mut mesh = marching_cubes(&sdf, 0.0);
        mesh.labels = labels_for(&model, &field, &rec, &mesh.vertices, k)?;
        let bytes = mesh_bytes(&mesh, ext)?;
        let name = format!("mesh_n{n}.{ext}");
        match &mesh_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| CliError::msg(format!("cannot create {}: {e}", d.display())))?;
                let p = d.join(&name);
                std::fs::write(&p, &bytes).map_err(|e| CliError::msg(format!("cannot write {}: {e}", p.display())))?;
                run.record(&p)?;
            }
            None => {
                run.write(&name, &bytes)?;
            }
        }
        let curve = threshold_sweep(&sdf, &rec.gt_occ, &vths)?;
        for p in &curve {
            report.push_str(&format!("{n},{},{},{}\n", p.v_th, p.points, p.iou));
        }
        if vths.len() > 1 {
            run.write(&format!("sweep_n{n}.csv"), sweep_csv(&curve).as_bytes())?;
        }
    }
    run.write("complete_report.csv", report.as_bytes())?;
    Ok(())
}

fn mesh_bytes(mesh: &TriangleMesh, ext: &str) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    if ext == "obj" {
        mesh.write_obj_to(&mut buf)?;
    } else {
        mesh.write_ply_to(&mut buf)?;
    }
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq)]
struct SceneScore {
    iou: f64,
    miou: Option<f64>,
}

fn score_model(model: &LodeModel, rec: &SceneRecord, inf: &InferenceConfig, k: usize) -> Result<SceneScore, CliError> {
    let field = model.infer(&rec.input_cloud, &rec.grid)?;
    let sdf = evaluate_grid(&field, inf)?;
    let mut pts = extract_surface_points(&sdf, inf.v_th)?;
    let iou = evaluate_scene(&pts, &rec.gt_occ, &rec.grid)?.iou;
    let miou = match labels_for(model, &field, rec, &pts.points, k)? {
        Some(l) => {
            pts = pts.with_labels(l)?;
            evaluate_semantics(&pts, &rec.gt_labeled()?, rec.num_classes)?.miou
        }
        None => None,
    };
    Ok(SceneScore { iou, miou })
}

/// The input cloud itself as the prediction.
fn score_input(rec: &SceneRecord) -> Result<SceneScore, CliError> {
    let iou = evaluate_scene(&rec.input_cloud, &rec.gt_occ, &rec.grid)?.iou;
    let miou = match rec.input_cloud.labels {
        Some(_) => evaluate_semantics(&rec.input_cloud, &rec.gt_labeled()?, rec.num_classes)?.miou,
        None => None,
    };
    Ok(SceneScore { iou, miou })
}

/// Trains `cfg` on the dataset (per scene for baselines) and scores every scene.
fn train_and_score(records: &[SceneRecord], cfg: &TrainConfig, s: &Settings) -> Result<Vec<(String, SceneScore)>, CliError> {
    let k: usize = s.parse("knn_k")?;
    let mut out = Vec::new();
    if cfg.mode == TrainMode::Lode {
        let model = fit(records, cfg)?.trainer.model;
        for rec in records {
            out.push((rec.id.clone(), score_model(&model, rec, &s.inference(&rec.grid)?, k)?));
        }
    } else {
        for rec in records {
            let fitted = fit(std::slice::from_ref(rec), cfg)?;
            if fitted.skipped_scenes.is_empty() {
                out.push((rec.id.clone(), score_model(&fitted.trainer.model, rec, &s.inference(&rec.grid)?, k)?));
            }
        }
    }
    Ok(out)
}

/// Variant name and settings for each row of an ablation table.
fn ablation_variants(s: &Settings, axis: &str) -> Result<Vec<(String, Settings)>, CliError> {
    let with = |pairs: &[(&str, String)]| -> Result<Settings, CliError> {
        let mut v = s.clone();
        for (k, val) in pairs {
            v.set(k, val)?;
        }
        Ok(v)
    };
    let d_se: usize = s.parse("d_se")?;
    let rows: Vec<(String, Vec<(&str, String)>)> = match axis {
        "sampling" => vec![
            ("trilinear".into(), vec![("sampling", "trilinear".into())]),
            ("nearest".into(), vec![("sampling", "nearest".into())]),
        ],
        "pe" => vec![
            ("none".into(), vec![("pe", "false".into())]),
            ("L5".into(), vec![("pe", "true".into()), ("pe_levels", "5".into()), ("include_xyz", "false".into())]),
            ("L10".into(), vec![("pe", "true".into()), ("pe_levels", "10".into()), ("include_xyz", "false".into())]),
            ("L10+xyz".into(), vec![("pe", "true".into()), ("pe_levels", "10".into()), ("include_xyz", "true".into())]),
        ],
        "shape" => [(d_se, 2usize), (d_se, 4), ((d_se / 2).max(1), 4)]
            .iter()
            .map(|&(d, sc)| (format!("dse{d}_scale{sc}"), vec![("d_se", d.to_string()), ("scale_size", sc.to_string())]))
            .collect(),
        "pruning" => ["all", "last:2", "last:1"].iter().map(|p| (p.to_string(), vec![("pruning", p.to_string())])).collect(),
        a => return Err(CliError::msg(format!("unknown ablation axis {a} (sampling | pe | shape | pruning)"))),
    };
    rows.into_iter().map(|(name, pairs)| Ok((name, with(&pairs)?))).collect()
}

pub fn eval(s: &Settings, run: &mut Run) -> Result<(), CliError> {
    let records = load_dataset(s)?;
    let k: usize = s.parse("knn_k")?;
    let mut table: Vec<(String, Vec<(String, SceneScore)>)> = Vec::new();
    if let Some(axis) = s.opt("ablate") {
        for (name, v) in ablation_variants(s, axis)? {
            log::info!("ablation variant {name}");
            table.push((name, train_and_score(&records, &v.train()?, &v)?));
        }
    } else if let Some(ckpt) = s.opt("checkpoint") {
        let mut rows = Vec::new();
        for rec in &records {
            let model = model_for(Path::new(ckpt), &rec.id)?;
            rows.push((rec.id.clone(), score_model(&model, rec, &s.inference(&rec.grid)?, k)?));
        }
        table.push(("model".into(), rows));
    } else {
        let rows = records.iter().map(|r| Ok((r.id.clone(), score_input(r)?))).collect::<Result<_, CliError>>()?;
        table.push(("input".into(), rows));
    }

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut scenes = String::from("variant,scene_id,iou,miou\n");
    let mut summary = String::from("variant,scenes,mean_iou,mean_miou\n");
    for (variant, rows) in &table {
        for (id, sc) in rows {
            scenes.push_str(&format!("{variant},{id},{},{}\n", sc.iou, fmt_opt(sc.miou)));
        }
        let n = rows.len().max(1) as f64;
        let mean_iou = rows.iter().map(|(_, r)| r.iou).sum::<f64>() / n;
        let mious: Vec<f64> = rows.iter().filter_map(|(_, r)| r.miou).collect();
        let mean_miou = (!mious.is_empty()).then(|| mious.iter().sum::<f64>() / mious.len() as f64);
        summary.push_str(&format!("{variant},{},{mean_iou},{}\n", rows.len(), fmt_opt(mean_miou)));
    }
    run.write("eval_scenes.csv", scenes.as_bytes())?;
    run.write("eval_summary.csv", summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

