//! Acceptance criteria 1-12, one result line each.
//!
//! `LODE_CRITERIA=1,2,5` runs a subset. `LODE_FULL_BENCHMARK=1` runs the
//! 50-scene benchmark instead of the 10-scene smoke variant. `LODE_KITTI`
//! points at a dataset manifest with one real scan for criterion 11.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lode::data::{benchmark_specs, sphere_plane_spec, synth_record, DatasetManifest, LidarConfig, SceneRecord, Shape};
use lode::encoder::EncoderConfig;
use lode::extract::{
    evaluate_grid, evaluate_scene, evaluate_semantics, extract_surface_points, knn_label_transfer, marching_cubes, predict_labels,
    sweep_csv, threshold_sweep, InferenceConfig,
};
use lode::field::mlp::flatten_layers;
use lode::field::trilinear::trilinear_weights;
use lode::field::{
    field_grad_params, trilinear_backprop, trilinear_sample, FieldEval, GradMode, ImplicitField, MlpParameters, PositionalEncodingConfig,
    SamplingMode,
};
use lode::loss::{lode_loss, LabeledPoints, LossWeights, SampleBatch};
use lode::sampler::SamplerConfig;
use lode::sparse::{generative_deconv, sparse_conv, ConvKernel, SparseTensor};
use lode::trainer::{fit, prepare, LodeModel, ModelConfig, SemanticMode, TrainConfig, TrainMode, Trainer};
use lode::{GridConfig, PointCloud, Vec3};

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass: Some(pass), detail: detail.into() }
    }

    fn skipped(detail: impl Into<String>) -> Self {
        Self { pass: None, detail: detail.into() }
    }
}

/// Criteria that do not pass with the experiment config; see the README.
const KNOWN_UNMET: &[u32] = &[6, 8];

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("LODE_CRITERIA").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn(&mut Shared) -> Outcome); 12] = [
        (1, "gradient correctness", c1_gradients),
        (2, "trilinear sampler", c2_trilinear),
        (3, "sparse engine oracles", c3_sparse),
        (4, "analytic SDF zero loss", c4_analytic_loss),
        (5, "single-scene overfit", c5_overfit),
        (6, "benchmark ordering", c6_ordering),
        (7, "trilinear vs nearest", c7_sampling),
        (8, "positional encoding ablation", c8_pe),
        (9, "semantic extensions", c9_semantics),
        (10, "threshold sweep", c10_sweep),
        (11, "real-data plumbing", c11_real_data),
        (12, "determinism", c12_determinism),
    ];
    let mut shared = Shared::default();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = run(&mut shared);
        let status = match out.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("criterion {id:>2} {status} {name} ({:.1}s): {}", t.elapsed().as_secs_f64(), out.detail);
        if out.pass == Some(false) && !KNOWN_UNMET.contains(&id) {
            unexpected.push(id);
        }
        if out.pass == Some(true) && KNOWN_UNMET.contains(&id) {
            println!("criterion {id:>2} now passes; drop it from KNOWN_UNMET");
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

/// Benchmark runs reused by several criteria.
#[derive(Default)]
struct Shared {
    bench: Option<Vec<SceneRecord>>,
    lode_default: Option<Vec<f64>>,
}

// ---------------------------------------------------------------- fixtures

fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

fn random_grid(rng: &mut ChaCha8Rng) -> GridConfig {
    let dims = [rng.random_range(4..=8), rng.random_range(4..=8), rng.random_range(2..=6)];
    let origin = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
    GridConfig::new(origin, rng.random_range(0.1..0.4), dims).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3], stride: i32, channels: usize, density: f64) -> SparseTensor {
    let mut coords = Vec::new();
    for i in (0..dims[0] as i32).step_by(stride as usize) {
        for j in (0..dims[1] as i32).step_by(stride as usize) {
            for k in (0..dims[2] as i32).step_by(stride as usize) {
                if rng.random::<f64>() < density {
                    coords.push([i, j, k]);
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push([0, 0, 0]);
    }
    let f = Array2::from_shape_fn((coords.len(), channels), |_| rng.random_range(-1.0..1.0));
    SparseTensor::new(stride, coords, f).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, g: &GridConfig, margin: f64) -> Vec3 {
    let lo = g.origin();
    let hi = g.max_corner();
    Vec3::from_fn(|a, _| rng.random_range(lo[a] + margin..hi[a] - margin))
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

/// Distance from `x` to the nearest plane through embedding-voxel centers,
/// where the interpolation weights have kinks.
fn kink_distance(g: &GridConfig, stride: i32, x: &Vec3) -> f64 {
    let cell = g.voxel_edge * stride as f64;
    (0..3)
        .map(|a| {
            let q = (x[a] - g.origin[a]) / cell - 0.5;
            (q - q.round()).abs() * cell
        })
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------- 1

fn c1_gradients(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_spatial, mut worst_param) = (0.0f64, 0.0f64);
    let (mut n_spatial, mut n_param) = (0usize, 0usize);
    let configs = 100;
    for _ in 0..configs {
        let grid = random_grid(&mut rng);
        let stride = [1, 2][rng.random_range(0..2)];
        let channels = rng.random_range(1..=3);
        let density = rng.random_range(0.5..1.0);
        let emb = random_tensor(&mut rng, grid.dims, stride, channels, density);
        let pe = PositionalEncodingConfig {
            enabled: rng.random_bool(0.7),
            levels: rng.random_range(1..=3),
            include_xyz: rng.random_bool(0.5),
        };
        let inputs = pe.width() + channels;
        let semantic = rng.random_bool(0.3);
        let omega = rng.random_range(1.0..5.0);
        let hidden = rng.random_range(3..=6);
        let depth = rng.random_range(1..=2);
        let field = ImplicitField {
            grid,
            embeddings: Some(emb),
            pe,
            sdf_mlp: MlpParameters::new_sine(inputs, hidden, depth, 1, omega, &mut rng),
            semantic_mlp: semantic.then(|| MlpParameters::new_sine(inputs, 4, 1, 3, omega, &mut rng)),
            grad_mode: if rng.random_bool(0.5) { GradMode::Total } else { GradMode::Partial },
            sampling: SamplingMode::Trilinear,
        };

        // spatial gradients: the total derivative is the one finite differences see
        let mut total = field.clone();
        total.grad_mode = GradMode::Total;
        let h = 1e-4 * grid.voxel_edge;
        for _ in 0..3 {
            let x = random_point(&mut rng, &grid, 2.0 * h);
            if kink_distance(&grid, stride, &x) < 1e-3 * grid.voxel_edge {
                continue;
            }
            let g = total.eval(&x).unwrap().spatial_grad;
            let fd = Vec3::from_fn(|a, _| {
                let mut p = x;
                p[a] += h;
                let mut m = x;
                m[a] -= h;
                (total.values(&[p]).unwrap()[0] - total.values(&[m]).unwrap()[0]) / (2.0 * h)
            });
            worst_spatial = worst_spatial.max((g - fd).norm() / fd.norm().max(1e-3));
            n_spatial += 1;
        }

        // parameter and embedding gradients of the full loss
        let n_on = rng.random_range(1..=4);
        let on_points: Vec<Vec3> = (0..n_on).map(|_| random_point(&mut rng, &grid, 0.0)).collect();
        let batch = SampleBatch {
            on_normals: (0..n_on).map(|_| unit(&mut rng)).collect(),
            off_points: (0..rng.random_range(1..=4)).map(|_| random_point(&mut rng, &grid, 0.0)).collect(),
            labeled: semantic.then(|| LabeledPoints { points: on_points.clone(), labels: (0..n_on).map(|_| rng.random_range(0..3)).collect() }),
            on_points,
        };
        let w = if semantic { LossWeights::with_semantics() } else { LossWeights::default() };
        let loss = |f: &ImplicitField| field_grad_params(f, &batch, &w).unwrap().0.total;
        let (_, grads) = field_grad_params(&field, &batch, &w).unwrap();
        let hp = 1e-6;
        let mut probe = |an: f64, set: &dyn Fn(&mut ImplicitField, f64)| {
            let mut p = field.clone();
            set(&mut p, hp);
            let mut m = field.clone();
            set(&mut m, -hp);
            let fd = (loss(&p) - loss(&m)) / (2.0 * hp);
            worst_param = worst_param.max(rel_err(an, fd, 1e-2));
            n_param += 1;
        };
        let flat = field.sdf_mlp.flat();
        let g_sdf = flatten_layers(&grads.sdf);
        for i in 0..flat.len() {
            probe(g_sdf[i], &|f, d| {
                let mut v = flat.clone();
                v[i] += d;
                f.sdf_mlp.set_flat(&v);
            });
        }
        let g_emb = grads.embedding.as_ref().unwrap();
        for r in 0..g_emb.nrows() {
            for c in 0..g_emb.ncols() {
                probe(g_emb[[r, c]], &|f, d| f.embeddings.as_mut().unwrap().features[[r, c]] += d);
            }
        }
        if let Some(head) = &field.semantic_mlp {
            let flat = head.flat();
            let g = flatten_layers(grads.semantic.as_ref().unwrap());
            for i in 0..flat.len() {
                probe(g[i], &|f, d| {
                    let mut v = flat.clone();
                    v[i] += d;
                    f.semantic_mlp.as_mut().unwrap().set_flat(&v);
                });
            }
        }
    }
    Outcome::check(
        worst_spatial <= 1e-4 && worst_param <= 1e-3 && n_spatial >= configs,
        format!(
            "{configs} configurations; spatial max rel err {worst_spatial:.2e} over {n_spatial} points (<= 1e-4); \
             parameter max rel err {worst_param:.2e} over {n_param} entries (<= 1e-3)"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn embedding_center(g: &GridConfig, c: [i32; 3], s: i32) -> Vec3 {
    Vec3::from_fn(|a, _| g.origin[a] + (c[a] as f64 + s as f64 / 2.0) * g.voxel_edge)
}

/// Sum over every stored embedding with hat-function weights.
fn full_grid_sample(v: &SparseTensor, g: &GridConfig, x: &Vec3) -> Vec<f64> {
    let s = v.stride();
    let cell = g.voxel_edge * s as f64;
    let mut e = vec![0.0; v.channels()];
    for (c, row) in v.coords().iter().zip(v.features.rows()) {
        let xc = embedding_center(g, *c, s);
        let w: f64 = (0..3).map(|a| (1.0 - ((x[a] - xc[a]) / cell).abs()).max(0.0)).product();
        for (d, r) in e.iter_mut().zip(row) {
            *d += w * r;
        }
    }
    e
}

fn c2_trilinear(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut oracle, mut backprop, mut unity, mut face) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let grid = random_grid(&mut rng);
        let stride = [1, 2, 4][rng.random_range(0..3)];
        let density = rng.random_range(0.4..1.0);
        let v = random_tensor(&mut rng, grid.dims, stride, 3, density);
        for _ in 0..20 {
            let x = random_point(&mut rng, &grid, 0.0);
            let e = trilinear_sample(&v, &grid, &x).unwrap();
            for (a, b) in e.iter().zip(full_grid_sample(&v, &grid, &x)) {
                oracle = oracle.max((a - b).abs());
            }
            let w = trilinear_weights(&grid, stride, &x);
            unity = unity.max((w.iter().map(|n| n.1).sum::<f64>() - 1.0).abs());
        }
        for _ in 0..3 {
            let x = random_point(&mut rng, &grid, 0.0);
            let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = trilinear_backprop(&v, &grid, &x, &up).unwrap();
            let dot = |t: &SparseTensor| -> f64 { trilinear_sample(t, &grid, &x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
            let h = 1e-6;
            for r in 0..v.len() {
                for c in 0..3 {
                    let mut p = v.clone();
                    p.features[[r, c]] += h;
                    let mut m = v.clone();
                    m.features[[r, c]] -= h;
                    backprop = backprop.max(((dot(&p) - dot(&m)) / (2.0 * h) - g[[r, c]]).abs());
                }
            }
        }
        let scale = v.features.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let cell = grid.voxel_edge * stride as f64;
        for _ in 0..20 {
            let mut x = random_point(&mut rng, &grid, 0.0);
            let a = rng.random_range(0..3usize);
            let k = ((x[a] - grid.origin[a]) / cell - 0.5).round();
            x[a] = grid.origin[a] + (k + 0.5) * cell;
            let (mut lo, mut hi) = (x, x);
            lo[a] -= 1e-6;
            hi[a] += 1e-6;
            if !grid.contains_point(&lo) || !grid.contains_point(&hi) {
                continue;
            }
            let (el, eh) = (trilinear_sample(&v, &grid, &lo).unwrap(), trilinear_sample(&v, &grid, &hi).unwrap());
            let d = el.iter().zip(&eh).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            face = face.max(d / scale);
        }
    }
    Outcome::check(
        oracle <= 1e-6 && backprop <= 1e-6 && unity <= 1e-12 && face <= 1e-4,
        format!(
            "oracle max diff {oracle:.1e} (<= 1e-6); backprop vs fd {backprop:.1e} (<= 1e-6); \
             weight sum err {unity:.1e}; face jump {face:.1e} of max |e| (<= 1e-4)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn lattice_offsets(lo: i32, hi: i32) -> Vec<[i32; 3]> {
    let mut v = Vec::new();
    for a in lo..hi {
        for b in lo..hi {
            for c in lo..hi {
                v.push([a, b, c]);
            }
        }
    }
    v
}

/// Dense volume on the stride-`s` lattice plus its occupancy mask.
fn densify(t: &SparseTensor, cells: [usize; 3]) -> (Array4<f64>, Array4<bool>) {
    let s = t.stride();
    let mut f = Array4::zeros((cells[0], cells[1], cells[2], t.channels()));
    let mut m = Array4::from_elem((cells[0], cells[1], cells[2], 1), false);
    for (c, row) in t.coords().iter().zip(t.features.rows()) {
        let i = [c[0] / s, c[1] / s, c[2] / s].map(|v| v as usize);
        m[[i[0], i[1], i[2], 0]] = true;
        for (ch, v) in row.iter().enumerate() {
            f[[i[0], i[1], i[2], ch]] = *v;
        }
    }
    (f, m)
}

fn tap_dot(out: &mut [f64], input: &Array4<f64>, at: [i64; 3], w: &Array2<f64>) {
    let d = input.dim();
    if (0..3).any(|a| at[a] < 0 || at[a] >= [d.0, d.1, d.2][a] as i64) {
        return;
    }
    for ci in 0..d.3 {
        let v = input[[at[0] as usize, at[1] as usize, at[2] as usize, ci]];
        if v != 0.0 {
            for (co, o) in out.iter_mut().enumerate() {
                *o += v * w[[ci, co]];
            }
        }
    }
}

/// Dense correlation evaluated at each output coordinate (input lattice units).
fn dense_conv(t: &SparseTensor, k: &ConvKernel, cells: [usize; 3], out: &[[i32; 3]]) -> BTreeMap<[i32; 3], Vec<f64>> {
    let s = t.stride();
    let (f, _) = densify(t, cells);
    let r = (k.size / 2) as i32;
    let taps = lattice_offsets(-r, r + 1);
    out.iter()
        .map(|o| {
            let mut acc = k.bias.to_vec();
            for (tap, d) in taps.iter().enumerate() {
                let at = [0, 1, 2].map(|a| (o[a] / s + d[a]) as i64);
                tap_dot(&mut acc, &f, at, &k.weights[tap]);
            }
            (*o, acc)
        })
        .collect()
}

/// Dense scatter of every active voxel through the transposed footprint.
fn dense_deconv(t: &SparseTensor, k: &ConvKernel, factor: i32, cells: [usize; 3]) -> BTreeMap<[i32; 3], Vec<f64>> {
    let s_out = t.stride() / factor;
    let (f, m) = densify(t, cells);
    let taps = lattice_offsets(0, k.size as i32);
    let mut out: BTreeMap<[i32; 3], Vec<f64>> = BTreeMap::new();
    for ((i, j, l, _), &active) in m.indexed_iter() {
        if !active {
            continue;
        }
        for (tap, d) in taps.iter().enumerate() {
            let fine = [i as i32 * factor + d[0], j as i32 * factor + d[1], l as i32 * factor + d[2]];
            let coord = fine.map(|v| v * s_out);
            let acc = out.entry(coord).or_insert_with(|| k.bias.to_vec());
            for (co, o) in acc.iter_mut().enumerate() {
                for ci in 0..f.dim().3 {
                    *o += f[[i, j, l, ci]] * k.weights[tap][[ci, co]];
                }
            }
        }
    }
    out
}

fn c3_sparse(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut support_mismatch = 0;
    let cases = 200;
    let mut kinds = [0usize; 3];
    for case in 0..cases {
        let kind = case % 3;
        kinds[kind] += 1;
        let stride = match kind {
            2 => [2, 4][rng.random_range(0..2)],
            _ => [1, 2][rng.random_range(0..2)],
        };
        let dims = [0; 3].map(|_| rng.random_range(2..=16usize).next_multiple_of(2 * stride as usize).min(16));
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let density = rng.random_range(0.1..0.6);
        let t = random_tensor(&mut rng, dims, stride, cin, density);
        let cells = dims.map(|d| d / stride as usize);
        let (sparse, dense) = match kind {
            0 | 1 => {
                let size = if kind == 0 { [1, 3, 5][rng.random_range(0..3)] } else { 3 };
                let k = ConvKernel::init_uniform(size, cin, cout, &mut rng);
                let stride_out = if kind == 0 { 1 } else { 2 };
                let y = sparse_conv(&t, &k, stride_out).unwrap();
                let d = dense_conv(&t, &k, cells, y.coords());
                let expected: BTreeSet<[i32; 3]> = if stride_out == 1 {
                    t.coords().iter().copied().collect()
                } else {
                    let s2 = 2 * stride;
                    t.coords().iter().map(|c| c.map(|v| v.div_euclid(s2) * s2)).collect()
                };
                if y.coord_set() != expected {
                    support_mismatch += 1;
                }
                (y, d)
            }
            _ => {
                let mut k = ConvKernel::init_uniform(2, cin, cout, &mut rng);
                k.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                let y = generative_deconv(&t, &k, 2).unwrap();
                (y, dense_deconv(&t, &k, 2, cells))
            }
        };
        if sparse.coord_set() != dense.keys().copied().collect::<BTreeSet<_>>() {
            support_mismatch += 1;
            continue;
        }
        for (c, row) in sparse.coords().iter().zip(sparse.features.rows()) {
            for (a, b) in row.iter().zip(&dense[c]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Outcome::check(
        worst <= 1e-5 && support_mismatch == 0,
        format!(
            "{cases} cases (submanifold {}, strided {}, generative {}); max abs diff {worst:.1e} (<= 1e-5); support mismatches {support_mismatch}",
            kinds[0], kinds[1], kinds[2]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_analytic_loss(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let c = Vec3::new(0.3, -0.2, 0.5);
    let r = 0.8;
    let n_on: Vec<Vec3> = (0..2000).map(|_| unit(&mut rng)).collect();
    let batch = SampleBatch {
        on_points: n_on.iter().map(|n| c + n * r).collect(),
        on_normals: n_on.clone(),
        off_points: (0..2000).map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0))).filter(|p| (p - c).norm() > 1e-3).collect(),
        labeled: None,
    };
    let evals: Vec<FieldEval> = batch
        .eikonal_points()
        .map(|p| FieldEval { value: (p - c).norm() - r, spatial_grad: (p - c).normalize(), embedding: Vec::new(), semantic_logits: None })
        .collect();
    let l = lode_loss(&evals, &batch, &LossWeights::default()).unwrap();
    Outcome::check(
        l.eikonal <= 1e-3 && l.normal <= 1e-3 && l.surface <= 1e-3,
        format!("eikonal {:.1e}, normal {:.1e}, surface {:.1e} (each <= 1e-3)", l.eikonal, l.normal, l.surface),
    )
}

// ---------------------------------------------------------------- experiment config

/// Network and schedule used by the trained criteria; see the README for the
/// reasons each differs from the library defaults.
fn experiment_config(seed: u64, epochs: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        seed,
        cosine_decay: true,
        weights: LossWeights { psi_alpha: 5.0, ..LossWeights::default() },
        sampler: SamplerConfig { n_on: 1000, n_off: 1000, seed, ..SamplerConfig::default() },
        model: ModelConfig {
            encoder: EncoderConfig::with_scale(vec![8, 16, 16, 32, 32], 4, 16).unwrap(),
            hidden: 64,
            depth: 3,
            pe: PositionalEncodingConfig::disabled(),
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn inference(n_inf: usize) -> InferenceConfig {
    InferenceConfig { n_inf, v_th: 0.1, ..InferenceConfig::default() }
}

/// IoU of the extracted surface points, lattice at voxel centers.
fn score(model: &LodeModel, rec: &SceneRecord) -> f64 {
    let field = model.infer(&rec.input_cloud, &rec.grid).unwrap();
    let sdf = evaluate_grid(&field, &inference(rec.grid.dims[0])).unwrap();
    let pts = extract_surface_points(&sdf, 0.1).unwrap();
    evaluate_scene(&pts, &rec.gt_occ, &rec.grid).unwrap().iou
}

// ---------------------------------------------------------------- 5

fn c5_overfit(_: &mut Shared) -> Outcome {
    let rec = synth_record(&sphere_plane_spec(1), 100.0, &LidarConfig::default(), "sphere_plane").unwrap();
    let steps = 3000;
    let out = fit(std::slice::from_ref(&rec), &experiment_config(1, steps)).unwrap();
    let model = &out.trainer.model;
    let iou = score(model, &rec);

    let field = model.infer(&rec.input_cloud, &rec.grid).unwrap();
    let mesh = marching_cubes(&evaluate_grid(&field, &inference(rec.grid.dims[0])).unwrap(), 0.0);
    let (center, radius) = rec
        .analytic_sdf
        .as_ref()
        .and_then(|s| {
            s.primitives.iter().find_map(|p| match p.shape {
                Shape::Sphere { center, radius } => Some((Vec3::from(center), radius)),
                _ => None,
            })
        })
        .expect("scene has a sphere");
    // sphere vertices: inside twice the radius and clear of the ground contact
    let edge = rec.grid.voxel_edge;
    let dev: Vec<f64> = mesh
        .vertices
        .iter()
        .filter(|v| (*v - center).norm() < 2.0 * radius && v[2] > 2.0 * edge)
        .map(|v| ((v - center).norm() - radius).abs())
        .collect();
    let mean_dev = if dev.is_empty() { f64::INFINITY } else { dev.iter().sum::<f64>() / dev.len() as f64 };
    Outcome::check(
        iou >= 0.8 && mean_dev <= 2.0 * edge,
        format!(
            "{steps} steps; IoU {iou:.3} at v_th 0.1 (>= 0.80); sphere radius error {mean_dev:.3} m over {} vertices (<= {:.2} m)",
            dev.len(),
            2.0 * edge
        ),
    )
}

// ---------------------------------------------------------------- 6-8

fn bench_scenes() -> usize {
    if std::env::var_os("LODE_FULL_BENCHMARK").is_some() {
        50
    } else {
        10
    }
}

const BENCH_SEED: u64 = 7;
const BENCH_EPOCHS: u64 = 200;
const BASELINE_STEPS: u64 = 300;

fn bench(shared: &mut Shared) -> &[SceneRecord] {
    shared.bench.get_or_insert_with(|| {
        benchmark_specs(bench_scenes(), BENCH_SEED)
            .iter()
            .enumerate()
            .map(|(i, s)| synth_record(s, 100.0, &LidarConfig::default(), &format!("scene_{i:03}")).unwrap())
            .collect()
    })
}

fn lode_scores(records: &[SceneRecord], cfg: &TrainConfig) -> Vec<f64> {
    let model = fit(records, cfg).unwrap().trainer.model;
    records.iter().map(|r| score(&model, r)).collect()
}

fn default_lode(shared: &mut Shared) -> Vec<f64> {
    if shared.lode_default.is_none() {
        let records = bench(shared).to_vec();
        shared.lode_default = Some(lode_scores(&records, &experiment_config(BENCH_SEED, BENCH_EPOCHS)));
    }
    shared.lode_default.clone().unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn c6_ordering(shared: &mut Shared) -> Outcome {
    let records = bench(shared).to_vec();
    let input: Vec<f64> = records.iter().map(|r| evaluate_scene(&r.input_cloud, &r.gt_occ, &r.grid).unwrap().iou).collect();
    let mut siren_cfg = experiment_config(BENCH_SEED, BASELINE_STEPS);
    siren_cfg.mode = TrainMode::SirenBaseline;
    let siren: Vec<f64> = records
        .iter()
        .map(|r| {
            let out = fit(std::slice::from_ref(r), &siren_cfg).unwrap();
            score(&out.trainer.model, r)
        })
        .collect();
    let lode = default_lode(shared);
    let (i, s, l) = (100.0 * mean(&input), 100.0 * mean(&siren), 100.0 * mean(&lode));
    Outcome::check(
        l >= s + 5.0 && l >= i + 10.0,
        format!("{} scenes; IoU input {i:.1}, SIREN {s:.1}, LODE {l:.1} (LODE >= SIREN + 5 and >= input + 10)", records.len()),
    )
}

fn c7_sampling(shared: &mut Shared) -> Outcome {
    let tri = default_lode(shared);
    let records = bench(shared).to_vec();
    let mut cfg = experiment_config(BENCH_SEED, BENCH_EPOCHS);
    cfg.model.sampling = SamplingMode::Nearest;
    let near = lode_scores(&records, &cfg);
    let wins = tri.iter().zip(&near).filter(|(t, n)| t >= n).count();
    let (t, n) = (100.0 * mean(&tri), 100.0 * mean(&near));
    let frac = wins as f64 / tri.len() as f64;
    Outcome::check(
        t >= n - 0.5 && frac >= 0.6,
        format!("IoU trilinear {t:.1}, nearest {n:.1} (trilinear >= nearest - 0.5); trilinear wins {wins}/{} scenes (>= 60%)", tri.len()),
    )
}

fn c8_pe(shared: &mut Shared) -> Outcome {
    let without = default_lode(shared);
    let records = bench(shared).to_vec();
    let mut cfg = experiment_config(BENCH_SEED, BENCH_EPOCHS);
    cfg.model.pe = PositionalEncodingConfig { enabled: true, levels: 10, include_xyz: false };
    let with = lode_scores(&records, &cfg);
    let (w, o) = (100.0 * mean(&with), 100.0 * mean(&without));
    Outcome::check(o <= w - 2.0, format!("IoU L=10 {w:.1}, no encoding {o:.1} (no encoding <= L=10 - 2)"))
}

// ---------------------------------------------------------------- 9

fn c9_semantics(shared: &mut Shared) -> Outcome {
    // label transfer with the labelled points as queries returns them verbatim
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let pts: Vec<Vec3> = (0..500).map(|_| Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0))).collect();
    let labels: Vec<u16> = (0..500).map(|_| rng.random_range(0..4)).collect();
    let cloud = PointCloud::new(pts.clone()).with_labels(labels.clone()).unwrap();
    let verbatim = knn_label_transfer(&cloud, &pts, 1).unwrap() == labels;

    let records: Vec<SceneRecord> = bench(shared).iter().take(3).cloned().collect();
    let mut cfg = experiment_config(BENCH_SEED, 600);
    cfg.model.semantic = SemanticMode::B;
    cfg.weights.semantic = LossWeights::with_semantics().semantic;
    let model = fit(&records, &cfg).unwrap().trainer.model;
    let mut mious = Vec::new();
    for r in &records {
        let field = model.infer(&r.input_cloud, &r.grid).unwrap();
        let sdf = evaluate_grid(&field, &inference(r.grid.dims[0])).unwrap();
        let pts = extract_surface_points(&sdf, 0.1).unwrap();
        let labels = predict_labels(&field, &pts.points).unwrap();
        let pred = pts.with_labels(labels).unwrap();
        if let Some(m) = evaluate_semantics(&pred, &r.gt_labeled().unwrap(), r.num_classes).unwrap().miou {
            mious.push(m);
        }
    }
    let miou = mean(&mious);
    Outcome::check(
        verbatim && miou >= 0.6 && !mious.is_empty(),
        format!("k=1 transfer verbatim: {verbatim}; extension B mIoU on completed voxels {miou:.3} over {} scenes (>= 0.60)", mious.len()),
    )
}

// ---------------------------------------------------------------- 10, 12

fn small_model(seed: u64) -> (Vec<SceneRecord>, Trainer, Vec<String>) {
    let records: Vec<SceneRecord> = benchmark_specs(2, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| synth_record(s, 50.0, &LidarConfig::default(), &format!("scene_{i:03}")).unwrap())
        .collect();
    let mut cfg = experiment_config(seed, 20);
    cfg.model.hidden = 32;
    cfg.sampler.n_on = 300;
    cfg.sampler.n_off = 300;
    let scenes = prepare(&records, &cfg).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut log = Vec::new();
    trainer.run(&scenes, None, |r| log.push(r.csv_line())).unwrap();
    (records, trainer, log)
}

const SWEEP: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.4, 0.8];

fn c10_sweep(_: &mut Shared) -> Outcome {
    let (records, trainer, _) = small_model(1010);
    let curves = || -> Vec<String> {
        records
            .iter()
            .map(|r| {
                let field = trainer.model.infer(&r.input_cloud, &r.grid).unwrap();
                let sdf = evaluate_grid(&field, &inference(r.grid.dims[0])).unwrap();
                sweep_csv(&threshold_sweep(&sdf, &r.gt_occ, &SWEEP).unwrap())
            })
            .collect()
    };
    let mut monotone = true;
    for r in &records {
        let field = trainer.model.infer(&r.input_cloud, &r.grid).unwrap();
        let sdf = evaluate_grid(&field, &inference(r.grid.dims[0])).unwrap();
        let counts: Vec<usize> = threshold_sweep(&sdf, &r.gt_occ, &SWEEP).unwrap().iter().map(|p| p.points).collect();
        monotone &= counts.windows(2).all(|w| w[0] <= w[1]);
    }
    let identical = curves() == curves();
    Outcome::check(
        monotone && identical,
        format!("{} scenes x {} thresholds; counts non-decreasing: {monotone}; curves identical across reruns: {identical}", records.len(), SWEEP.len()),
    )
}

fn c12_determinism(_: &mut Shared) -> Outcome {
    let run = || {
        let (records, trainer, log) = small_model(1212);
        let r = &records[0];
        let field = trainer.model.infer(&r.input_cloud, &r.grid).unwrap();
        let mesh = marching_cubes(&evaluate_grid(&field, &inference(32)).unwrap(), 0.0);
        let mut ply = Vec::new();
        mesh.write_ply_to(&mut ply).unwrap();
        (trainer.to_checkpoint().unwrap().to_bytes(), log.join("\n"), ply)
    };
    let (a, b) = (run(), run());
    let (ck, lg, me) = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
    Outcome::check(
        ck && lg && me,
        format!("checkpoint identical: {ck} ({} bytes); log identical: {lg}; mesh identical: {me} ({} bytes)", a.0.len(), a.2.len()),
    )
}

// ---------------------------------------------------------------- 11

fn c11_real_data(_: &mut Shared) -> Outcome {
    let Some(path) = std::env::var_os("LODE_KITTI") else {
        return Outcome::skipped("set LODE_KITTI to a dataset manifest with one real scan");
    };
    let path = std::path::PathBuf::from(path);
    let root = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let manifest = match DatasetManifest::load(&path) {
        Ok(m) => m,
        Err(e) => return Outcome::check(false, format!("cannot load {}: {e}", path.display())),
    };
    let Some(entry) = manifest.scenes.first() else {
        return Outcome::check(false, "manifest lists no scenes");
    };
    match manifest.load_entry(entry, &root).and_then(|r| evaluate_scene(&r.input_cloud, &r.gt_occ, &r.grid)) {
        Ok(rep) => Outcome::check(rep.iou > 0.0 && rep.iou < 1.0, format!("input IoU {:.3} on {} (in (0, 1))", rep.iou, entry.id)),
        Err(e) => Outcome::check(false, e.to_string()),
    }
}
