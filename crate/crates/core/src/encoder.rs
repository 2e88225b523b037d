//! Sparse encoder-decoder that turns an occupancy volume into a shape
//! embedding volume, with pruning heads supervised by binary cross-entropy.
//!
//! Layout for the default configuration (strides in base voxels):
//!
//! ```text
//! occ(1) -subconv-> s1 -conv/2-> s2 -conv/2-> s4 -conv/2-> s8 -conv/2-> s16
//!                                              |           |            |
//!                                           aux head    aux head     aux head
//! s16 -deconv-> s8 (+skip s8) -subconv-> head/prune -deconv-> s4 (+skip s4)
//!     -subconv-> head/prune -output block-> v_se at s4
//! ```
//!
//! Auxiliary heads on the encoder only contribute to the completion loss.
//! Decoder heads prune: with ground truth the target mask is applied, without
//! it the predicted mask is.

use ndarray::{s, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::grid::{Coord, GridConfig, OccupancyVolume};
use crate::loss::PROB_CLAMP;
use crate::sparse::{
    apply_rulebook, conv_rulebook, deconv_rulebook, downsample_occupancy, prune_mask, rulebook_backward, sigmoid, ConvKernel,
    Rulebook, SparseTensor,
};

pub const LEAKY_SLOPE: f64 = 0.01;
const CONV_K: usize = 3;
const DECONV_K: usize = 2;

/// Which supervised blocks are active, counted from the end of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruningPlacement {
    All,
    Last(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub scale_size: usize,
    pub d_se: usize,
    pub pruning_placement: PruningPlacement,
    pub output_block_convs: usize,
    pub prune_threshold: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![16, 32, 64, 128, 256],
            dec_channels: vec![128, 64],
            scale_size: 4,
            d_se: 256,
            pruning_placement: PruningPlacement::All,
            output_block_convs: 2,
            prune_threshold: 0.5,
        }
    }
}

impl EncoderConfig {
    /// Decoder widths mirror the encoder, with as many stages as needed to
    /// come back up to `scale_size`.
    pub fn with_scale(enc_channels: Vec<usize>, scale_size: usize, d_se: usize) -> Result<Self> {
        if scale_size == 0 || !scale_size.is_power_of_two() {
            return Err(LodeError::Config(format!("scale_size must be a power of two, got {scale_size}")));
        }
        let n_enc = enc_channels.len().saturating_sub(1);
        let up = scale_size.trailing_zeros() as usize;
        if up > n_enc {
            return Err(LodeError::Config(format!("scale_size {scale_size} exceeds encoder depth {n_enc}")));
        }
        let dec_channels = (0..n_enc - up).map(|d| enc_channels[n_enc - 1 - d]).collect();
        let cfg = Self { enc_channels, dec_channels, scale_size, d_se, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of stride-2 encoder stages.
    pub fn encoder_stages(&self) -> usize {
        self.enc_channels.len() - 1
    }

    pub fn decoder_stages(&self) -> usize {
        self.dec_channels.len()
    }

    /// Stride of the deepest encoder level.
    pub fn bottleneck_stride(&self) -> usize {
        1 << self.encoder_stages()
    }

    /// Candidate supervised blocks in network order: encoder levels from
    /// `scale_size` up to the bottleneck, then each decoder stage.
    fn candidate_blocks(&self) -> Vec<BlockSource> {
        let n_enc = self.encoder_stages();
        let first = n_enc - self.decoder_stages();
        let mut v: Vec<BlockSource> = (first..=n_enc).map(BlockSource::Encoder).collect();
        v.extend((0..self.decoder_stages()).map(BlockSource::Decoder));
        v
    }

    fn active_blocks(&self) -> Vec<BlockSource> {
        let all = self.candidate_blocks();
        match self.pruning_placement {
            PruningPlacement::All => all,
            PruningPlacement::Last(k) => all[all.len() - k.min(all.len())..].to_vec(),
        }
    }

    /// Count of supervised blocks `m`.
    pub fn supervised_blocks(&self) -> usize {
        self.active_blocks().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) || self.dec_channels.contains(&0) {
            return Err(LodeError::Config("channel counts must be positive".into()));
        }
        if self.d_se == 0 {
            return Err(LodeError::Config("d_se must be at least 1".into()));
        }
        let n_enc = self.encoder_stages();
        if self.decoder_stages() > n_enc {
            return Err(LodeError::Config("more decoder stages than encoder stages".into()));
        }
        let expect = 1usize << (n_enc - self.decoder_stages());
        if self.scale_size != expect {
            return Err(LodeError::Config(format!(
                "scale_size {} inconsistent with {} encoder and {} decoder stages (expected {expect})",
                self.scale_size,
                n_enc,
                self.decoder_stages()
            )));
        }
        if !(1..=4).contains(&self.output_block_convs) {
            return Err(LodeError::Config(format!("output_block_convs must be 1..4, got {}", self.output_block_convs)));
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return Err(LodeError::Config(format!("prune_threshold must lie in (0, 1), got {}", self.prune_threshold)));
        }
        if let PruningPlacement::Last(k) = self.pruning_placement {
            let max = self.candidate_blocks().len();
            if k == 0 || k > max {
                return Err(LodeError::Config(format!("pruning placement Last({k}) outside 1..={max}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockSource {
    /// Auxiliary head on encoder level `l` (stride `2^l`).
    Encoder(usize),
    /// Pruning head of decoder stage `d`.
    Decoder(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedBlock {
    pub source: BlockSource,
    pub stride: i32,
    pub coords: Vec<Coord>,
    pub logits: Vec<f64>,
    pub targets: Vec<f64>,
}

impl SupervisedBlock {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruningSupervision {
    pub blocks: Vec<SupervisedBlock>,
}

impl PruningSupervision {
    pub fn m(&self) -> usize {
        self.blocks.len()
    }
}

/// Encoder-decoder parameters. The same layout doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoder {
    pub cfg: EncoderConfig,
    /// `enc[0]` is the stride-1 stem, `enc[l]` the stride-2 conv into level `l`.
    pub enc: Vec<ConvKernel>,
    pub aux_heads: Vec<(usize, ConvKernel)>,
    pub dec_up: Vec<ConvKernel>,
    pub dec_conv: Vec<ConvKernel>,
    pub dec_heads: Vec<Option<ConvKernel>>,
    pub out: Vec<ConvKernel>,
}

impl SparseEncoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n_enc = cfg.encoder_stages();
        let ec = &cfg.enc_channels;
        let mut enc = vec![ConvKernel::init_uniform(CONV_K, 1, ec[0], rng)];
        for l in 1..=n_enc {
            enc.push(ConvKernel::init_uniform(CONV_K, ec[l - 1], ec[l], rng));
        }
        let active = cfg.active_blocks();
        let aux_heads = active
            .iter()
            .filter_map(|b| match b {
                BlockSource::Encoder(l) => Some((*l, ConvKernel::init_uniform(CONV_K, ec[*l], 1, rng))),
                BlockSource::Decoder(_) => None,
            })
            .collect();
        let mut dec_up = Vec::new();
        let mut dec_conv = Vec::new();
        let mut dec_heads = Vec::new();
        let mut prev = ec[n_enc];
        for (d, &c) in cfg.dec_channels.iter().enumerate() {
            let skip = ec[n_enc - 1 - d];
            dec_up.push(ConvKernel::init_uniform(DECONV_K, prev, c, rng));
            dec_conv.push(ConvKernel::init_uniform(CONV_K, c + skip, c, rng));
            dec_heads.push(active.contains(&BlockSource::Decoder(d)).then(|| ConvKernel::init_uniform(CONV_K, c, 1, rng)));
            prev = c;
        }
        let mut out = Vec::new();
        for _ in 0..cfg.output_block_convs {
            out.push(ConvKernel::init_uniform(CONV_K, prev, cfg.d_se, rng));
            prev = cfg.d_se;
        }
        Ok(Self { cfg, enc, aux_heads, dec_up, dec_conv, dec_heads, out })
    }

    /// Parameter buffer of identical layout, all zeros.
    pub fn zero_grad(&self) -> SparseEncoder {
        let mut g = self.clone();
        for k in g.kernels_mut() {
            *k = ConvKernel::zeros(k.size, k.in_channels(), k.out_channels());
        }
        g
    }

    /// Every kernel with a stable name, in a fixed order.
    pub fn named_kernels(&self) -> Vec<(String, &ConvKernel)> {
        let mut v = Vec::new();
        for (i, k) in self.enc.iter().enumerate() {
            v.push((format!("enc{i}"), k));
        }
        for (l, k) in &self.aux_heads {
            v.push((format!("aux{l}"), k));
        }
        for (d, k) in self.dec_up.iter().enumerate() {
            v.push((format!("dec{d}.up"), k));
        }
        for (d, k) in self.dec_conv.iter().enumerate() {
            v.push((format!("dec{d}.conv"), k));
        }
        for (d, k) in self.dec_heads.iter().enumerate() {
            if let Some(k) = k {
                v.push((format!("dec{d}.head"), k));
            }
        }
        for (i, k) in self.out.iter().enumerate() {
            v.push((format!("out{i}"), k));
        }
        v
    }

    pub fn kernels(&self) -> Vec<&ConvKernel> {
        self.named_kernels().into_iter().map(|(_, k)| k).collect()
    }

    /// Same order as [`SparseEncoder::named_kernels`].
    pub fn kernels_mut(&mut self) -> Vec<&mut ConvKernel> {
        let mut v: Vec<&mut ConvKernel> = Vec::new();
        v.extend(self.enc.iter_mut());
        v.extend(self.aux_heads.iter_mut().map(|(_, k)| k));
        v.extend(self.dec_up.iter_mut());
        v.extend(self.dec_conv.iter_mut());
        v.extend(self.dec_heads.iter_mut().flatten());
        v.extend(self.out.iter_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.kernels().iter().map(|k| k.num_params()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.kernels().iter().flat_map(|k| k.flat()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for k in self.kernels_mut() {
            let n = k.num_params();
            k.set_flat(&v[off..off + n]);
            off += n;
        }
    }

    /// Adds `g` into `self`; both must share a layout.
    pub fn add_assign(&mut self, g: &SparseEncoder) {
        for (a, b) in self.kernels_mut().into_iter().zip(g.kernels()) {
            for (wa, wb) in a.weights.iter_mut().zip(&b.weights) {
                *wa += wb;
            }
            a.bias += &b.bias;
        }
    }

    pub fn encode(
        &self,
        v_occ: &SparseTensor,
        grid: &GridConfig,
        gt_occ: Option<&OccupancyVolume>,
    ) -> Result<(SparseTensor, Option<PruningSupervision>)> {
        let tape = self.forward(v_occ, grid, gt_occ)?;
        Ok((tape.v_se, tape.sup))
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward(&self, v_occ: &SparseTensor, grid: &GridConfig, gt_occ: Option<&OccupancyVolume>) -> Result<EncoderTape> {
        self.cfg.validate()?;
        if v_occ.is_empty() {
            return Err(LodeError::EmptyInput);
        }
        if v_occ.stride() != 1 || v_occ.channels() != 1 {
            return Err(LodeError::Config(format!(
                "encoder input must be stride 1 with one channel, got stride {} and {} channels",
                v_occ.stride(),
                v_occ.channels()
            )));
        }
        if let Some(gt) = gt_occ {
            grid.check_same(&gt.grid)?;
        }
        let n_enc = self.cfg.encoder_stages();
        let targets = match gt_occ {
            Some(gt) => {
                let strides: Vec<usize> = (0..=n_enc).map(|l| 1 << l).collect();
                Some(pruning_targets(gt, &strides)?)
            }
            None => None,
        };
        let bounds = Some(grid.dims);

        let (coords, stride, rb) = conv_rulebook(v_occ, CONV_K, 1)?;
        let (feat, rec) = conv_forward(&v_occ.features, rb, &self.enc[0], true)?;
        let mut levels = vec![SparseTensor::new(stride, coords, feat)?];
        let mut enc_recs = vec![rec];
        for l in 1..=n_enc {
            let (coords, stride, rb) = conv_rulebook(&levels[l - 1], CONV_K, 2)?;
            let (feat, rec) = conv_forward(&levels[l - 1].features, rb, &self.enc[l], true)?;
            levels.push(SparseTensor::new(stride, coords, feat)?);
            enc_recs.push(rec);
        }

        let mut blocks = Vec::new();
        let mut aux_recs = Vec::new();
        if let Some(t) = &targets {
            for (l, head) in &self.aux_heads {
                let level = &levels[*l];
                let (coords, _, rb) = conv_rulebook(level, CONV_K, 1)?;
                let (logits, rec) = conv_forward(&level.features, rb, head, false)?;
                blocks.push(SupervisedBlock {
                    source: BlockSource::Encoder(*l),
                    stride: level.stride(),
                    targets: targets_at(&t[*l], level.stride(), &coords),
                    coords,
                    logits: logits.column(0).to_vec(),
                });
                aux_recs.push(rec);
            }
        }

        let mut cur = levels[n_enc].clone();
        let mut dec_recs = Vec::new();
        for d in 0..self.cfg.decoder_stages() {
            let (coords, stride, rb) = deconv_rulebook(&cur, DECONV_K, 2, bounds)?;
            let (up_feat, up) = conv_forward(&cur.features, rb, &self.dec_up[d], true)?;
            let up_t = SparseTensor::new(stride, coords.clone(), up_feat)?;
            let skip_level = n_enc - 1 - d;
            let (skip_feat, skip_map) = up_t.gather_from(&levels[skip_level]);
            let up_c = up_t.channels();
            let mut cat = Array2::zeros((up_t.len(), up_c + skip_feat.ncols()));
            cat.slice_mut(s![.., ..up_c]).assign(&up_t.features);
            cat.slice_mut(s![.., up_c..]).assign(&skip_feat);
            let (_, _, rb) = conv_rulebook(&up_t, CONV_K, 1)?;
            let (feat, conv) = conv_forward(&cat, rb, &self.dec_conv[d], true)?;
            let full = SparseTensor::new(stride, coords, feat)?;

            let (keep, head) = match &self.dec_heads[d] {
                Some(head_k) => {
                    let (_, _, rb) = conv_rulebook(&full, CONV_K, 1)?;
                    let (logits, head) = conv_forward(&full.features, rb, head_k, false)?;
                    let logits = logits.column(0).to_vec();
                    let keep = match &targets {
                        Some(t) => {
                            let y = targets_at(&t[skip_level], stride, full.coords());
                            blocks.push(SupervisedBlock {
                                source: BlockSource::Decoder(d),
                                stride,
                                coords: full.coords().to_vec(),
                                logits: logits.clone(),
                                targets: y.clone(),
                            });
                            y.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect()
                        }
                        None => prune_mask(&logits, self.cfg.prune_threshold),
                    };
                    (keep, Some(head))
                }
                None => ((0..full.len()).collect(), None),
            };
            cur = full.select_rows(&keep);
            dec_recs.push(DecoderRecord { up, skip_map, skip_level, up_channels: up_c, conv, head, keep, n_full: full.len() });
        }

        let mut out_recs = Vec::new();
        let n_out = self.out.len();
        for (i, k) in self.out.iter().enumerate() {
            let (_, _, rb) = conv_rulebook(&cur, CONV_K, 1)?;
            let (feat, rec) = conv_forward(&cur.features, rb, k, i + 1 < n_out)?;
            cur = cur.with_features(feat)?;
            out_recs.push(rec);
        }

        let sup = targets.map(|_| PruningSupervision { blocks });
        Ok(EncoderTape { v_se: cur, sup, level_sizes: levels.iter().map(|l| l.len()).collect(), enc_recs, aux_recs, dec_recs, out_recs })
    }

    /// Reverse pass. `grad_v_se` is dL/d(v_se features) (omitted when the
    /// field loss is not used) and `grad_logits[i]` is dL/d(logits of
    /// supervised block i).
    pub fn backward(&self, tape: &EncoderTape, grad_v_se: Option<&Array2<f64>>, grad_logits: &[Vec<f64>]) -> Result<SparseEncoder> {
        let mut grads = self.zero_grad();
        let n_blocks = tape.sup.as_ref().map(|s| s.blocks.len()).unwrap_or(0);
        if !grad_logits.is_empty() && grad_logits.len() != n_blocks {
            return Err(LodeError::LengthMismatch { expected: n_blocks, got: grad_logits.len() });
        }
        let block_grad = |src: BlockSource| -> Option<&Vec<f64>> {
            let sup = tape.sup.as_ref()?;
            let i = sup.blocks.iter().position(|b| b.source == src)?;
            grad_logits.get(i)
        };

        let mut cur = match grad_v_se {
            Some(g) => {
                if g.dim() != tape.v_se.features.dim() {
                    return Err(LodeError::LengthMismatch { expected: tape.v_se.features.len(), got: g.len() });
                }
                g.clone()
            }
            None => Array2::zeros(tape.v_se.features.dim()),
        };
        for (i, rec) in tape.out_recs.iter().enumerate().rev() {
            let (gi, gk) = conv_backward(rec, &self.out[i], &cur);
            grads.out[i] = gk;
            cur = gi;
        }

        let n_enc = self.cfg.encoder_stages();
        let mut enc_grad: Vec<Array2<f64>> =
            (0..=n_enc).map(|l| Array2::zeros((tape.level_sizes[l], self.cfg.enc_channels[l]))).collect();
        for (d, rec) in tape.dec_recs.iter().enumerate().rev() {
            let mut full = Array2::zeros((rec.n_full, cur.ncols()));
            for (src, &dst) in rec.keep.iter().enumerate() {
                let mut row = full.row_mut(dst);
                row += &cur.row(src);
            }
            if let (Some(head), Some(head_k)) = (&rec.head, &self.dec_heads[d]) {
                if let Some(g) = block_grad(BlockSource::Decoder(d)) {
                    let g = Array2::from_shape_vec((g.len(), 1), g.clone()).expect("column");
                    let (gi, gk) = conv_backward(head, head_k, &g);
                    full += &gi;
                    grads.dec_heads[d] = Some(gk);
                }
            }
            let (g_cat, gk) = conv_backward(&rec.conv, &self.dec_conv[d], &full);
            grads.dec_conv[d] = gk;
            let eg = &mut enc_grad[rec.skip_level];
            for (row, m) in rec.skip_map.iter().enumerate() {
                if let Some(r) = m {
                    let mut dst = eg.row_mut(*r);
                    dst += &g_cat.slice(s![row, rec.up_channels..]);
                }
            }
            let g_up = g_cat.slice(s![.., ..rec.up_channels]).to_owned();
            let (gi, gk) = conv_backward(&rec.up, &self.dec_up[d], &g_up);
            grads.dec_up[d] = gk;
            cur = gi;
        }
        enc_grad[n_enc] += &cur;

        for (i, ((l, head_k), rec)) in self.aux_heads.iter().zip(&tape.aux_recs).enumerate() {
            if let Some(g) = block_grad(BlockSource::Encoder(*l)) {
                let g = Array2::from_shape_vec((g.len(), 1), g.clone()).expect("column");
                let (gi, gk) = conv_backward(rec, head_k, &g);
                enc_grad[*l] += &gi;
                grads.aux_heads[i].1 = gk;
            }
        }

        for l in (0..=n_enc).rev() {
            let (gi, gk) = conv_backward(&tape.enc_recs[l], &self.enc[l], &enc_grad[l]);
            grads.enc[l] = gk;
            if l > 0 {
                enc_grad[l - 1] += &gi;
            }
        }
        Ok(grads)
    }
}

struct ConvRecord {
    rb: Rulebook,
    input: Array2<f64>,
    pre: Array2<f64>,
    leaky: bool,
}

struct DecoderRecord {
    up: ConvRecord,
    skip_map: Vec<Option<usize>>,
    skip_level: usize,
    up_channels: usize,
    conv: ConvRecord,
    head: Option<ConvRecord>,
    keep: Vec<usize>,
    n_full: usize,
}

/// Intermediate state of one forward pass.
pub struct EncoderTape {
    pub v_se: SparseTensor,
    pub sup: Option<PruningSupervision>,
    level_sizes: Vec<usize>,
    enc_recs: Vec<ConvRecord>,
    aux_recs: Vec<ConvRecord>,
    dec_recs: Vec<DecoderRecord>,
    out_recs: Vec<ConvRecord>,
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn conv_forward(input: &Array2<f64>, rb: Rulebook, kernel: &ConvKernel, act: bool) -> Result<(Array2<f64>, ConvRecord)> {
    let pre = apply_rulebook(input, &rb, kernel)?;
    let out = if act { pre.mapv(leaky) } else { pre.clone() };
    Ok((out, ConvRecord { rb, input: input.clone(), pre, leaky: act }))
}

fn conv_backward(rec: &ConvRecord, kernel: &ConvKernel, grad_out: &Array2<f64>) -> (Array2<f64>, ConvKernel) {
    let mut g = grad_out.clone();
    if rec.leaky {
        Zip::from(&mut g).and(&rec.pre).for_each(|g, &p| {
            if p < 0.0 {
                *g *= LEAKY_SLOPE;
            }
        });
    }
    rulebook_backward(&rec.input, &rec.rb, kernel, &g)
}

/// Ground-truth occupancy max-pooled to each stride.
pub fn pruning_targets(gt_occ: &OccupancyVolume, strides: &[usize]) -> Result<Vec<OccupancyVolume>> {
    strides.iter().map(|&s| downsample_occupancy(gt_occ, s)).collect()
}

/// Binary target per candidate coordinate (base-grid units at `stride`).
pub fn targets_at(coarse: &OccupancyVolume, stride: i32, coords: &[Coord]) -> Vec<f64> {
    coords
        .iter()
        .map(|c| {
            let cell = [c[0] / stride, c[1] / stride, c[2] / stride];
            if coarse.contains(&cell) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn clamped_prob(logit: f64) -> (f64, bool) {
    let p = sigmoid(logit);
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Mean over non-empty blocks of the per-block mean binary cross-entropy.
pub fn completion_loss(sup: &PruningSupervision) -> Result<f64> {
    Ok(completion_loss_grad(sup)?.0)
}

/// Completion loss with its gradient w.r.t. every block's logits.
pub fn completion_loss_grad(sup: &PruningSupervision) -> Result<(f64, Vec<Vec<f64>>)> {
    if sup.blocks.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    for b in &sup.blocks {
        if b.logits.len() != b.targets.len() {
            return Err(LodeError::LengthMismatch { expected: b.logits.len(), got: b.targets.len() });
        }
    }
    let m = sup.blocks.iter().filter(|b| !b.is_empty()).count();
    let mut grads: Vec<Vec<f64>> = sup.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
    if m == 0 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for (b, g) in sup.blocks.iter().zip(grads.iter_mut()) {
        if b.is_empty() {
            continue;
        }
        let n = b.len() as f64;
        let mut sum = 0.0;
        for ((&l, &y), gj) in b.logits.iter().zip(&b.targets).zip(g.iter_mut()) {
            let (p, clamped) = clamped_prob(l);
            sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if !clamped {
                *gj = (p - y) / (n * m as f64);
            }
        }
        total += sum / n;
    }
    Ok((total / m as f64, grads))
}
