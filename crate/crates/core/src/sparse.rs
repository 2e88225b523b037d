//! Coordinate-indexed sparse tensors and the convolution family that runs on them.
//!
//! Coordinates are stored in base-grid voxel units, so a tensor at stride `s`
//! only holds coordinates divisible by `s`. Rows are kept in lexicographic
//! coordinate order, which makes every operation bit-reproducible.
//!
//! Convolutions are expressed as a [`Rulebook`]: for each kernel tap, the list
//! of `(input row, output row)` pairs it connects. Forward and backward passes
//! both walk the same rulebook.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use crate::error::{LodeError, Result};
use crate::grid::{Coord, GridConfig, OccupancyVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    stride: i32,
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
    pub features: Array2<f64>,
}

impl SparseTensor {
    /// Builds a tensor from unordered rows; rows are re-sorted lexicographically.
    pub fn new(stride: i32, coords: Vec<Coord>, features: Array2<f64>) -> Result<Self> {
        if stride < 1 {
            return Err(LodeError::Config(format!("stride must be positive, got {stride}")));
        }
        if features.nrows() != coords.len() {
            return Err(LodeError::LengthMismatch { expected: coords.len(), got: features.nrows() });
        }
        for c in &coords {
            if c.iter().any(|v| v.rem_euclid(stride) != 0) {
                return Err(LodeError::Config(format!("coordinate {c:?} not divisible by stride {stride}")));
            }
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        let sorted: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(LodeError::Config("duplicate coordinates".into()));
        }
        let features = features.select(Axis(0), &order);
        Ok(Self::from_sorted(stride, sorted, features))
    }

    fn from_sorted(stride: i32, coords: Vec<Coord>, features: Array2<f64>) -> Self {
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { stride, coords, index, features }
    }

    pub fn empty(stride: i32, channels: usize) -> Self {
        Self::from_sorted(stride, Vec::new(), Array2::zeros((0, channels)))
    }

    /// Stride-1 occupancy tensor with a single channel of ones.
    pub fn from_occupancy(occ: &OccupancyVolume) -> Self {
        let coords: Vec<Coord> = occ.occupied.iter().copied().collect();
        let n = coords.len();
        Self::from_sorted(1, coords, Array2::ones((n, 1)))
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn coord_set(&self) -> BTreeSet<Coord> {
        self.coords.iter().copied().collect()
    }

    /// Keeps the given rows (must be increasing) in order.
    pub fn select_rows(&self, rows: &[usize]) -> SparseTensor {
        let coords = rows.iter().map(|&r| self.coords[r]).collect();
        Self::from_sorted(self.stride, coords, self.features.select(Axis(0), rows))
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<SparseTensor> {
        if features.nrows() != self.len() {
            return Err(LodeError::LengthMismatch { expected: self.len(), got: features.nrows() });
        }
        Ok(Self { stride: self.stride, coords: self.coords.clone(), index: self.index.clone(), features })
    }

    /// Gathers the features of `other` at this tensor's coordinates (zeros where absent).
    pub fn gather_from(&self, other: &SparseTensor) -> (Array2<f64>, Vec<Option<usize>>) {
        let mut out = Array2::zeros((self.len(), other.channels()));
        let mut map = Vec::with_capacity(self.len());
        for (i, c) in self.coords.iter().enumerate() {
            let r = other.row_of(c);
            if let Some(r) = r {
                out.row_mut(i).assign(&other.features.row(r));
            }
            map.push(r);
        }
        (out, map)
    }

    /// Writes `x y z f0 f1 ...` lines for inspection.
    pub fn debug_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# stride {} rows {} channels {}", self.stride, self.len(), self.channels())?;
        for (c, row) in self.coords.iter().zip(self.features.rows()) {
            write!(w, "{} {} {}", c[0], c[1], c[2])?;
            for v in row {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Cubic kernel with taps in lexicographic offset order, one `in x out` matrix per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub size: usize,
    pub weights: Vec<Array2<f64>>,
    pub bias: Array1<f64>,
}

impl ConvKernel {
    pub fn zeros(size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            size,
            weights: vec![Array2::zeros((in_channels, out_channels)); size.pow(3)],
            bias: Array1::zeros(out_channels),
        }
    }

    /// Uniform in +-sqrt(6 / fan_in), fan_in = taps * in_channels; zero bias.
    pub fn init_uniform<R: Rng>(size: usize, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = (size.pow(3) * in_channels) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut k = Self::zeros(size, in_channels, out_channels);
        for w in k.weights.iter_mut() {
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        k
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() * self.in_channels() * self.out_channels() + self.out_channels()
    }

    fn check_shape(&self) -> Result<()> {
        if self.weights.len() != self.size.pow(3) {
            return Err(LodeError::Config(format!("kernel has {} taps, size {}", self.weights.len(), self.size)));
        }
        let (i, o) = (self.in_channels(), self.out_channels());
        if self.weights.iter().any(|w| w.dim() != (i, o)) {
            return Err(LodeError::Config("inconsistent kernel tap shapes".into()));
        }
        Ok(())
    }

    /// Flattened view: all tap weights (row-major) then the bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for w in &self.weights {
            v.extend(w.iter().copied());
        }
        v.extend(self.bias.iter().copied());
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|x| *x = it.next().expect("flat kernel length"));
        }
        self.bias.iter_mut().for_each(|x| *x = it.next().expect("flat kernel length"));
    }
}

/// Offsets of a centered odd kernel, lexicographic.
fn centered_offsets(k: usize) -> Vec<[i32; 3]> {
    let r = (k / 2) as i32;
    let mut v = Vec::with_capacity(k.pow(3));
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                v.push([a, b, c]);
            }
        }
    }
    v
}

/// Offsets of a transposed kernel footprint `{0..k}^3`, lexicographic.
fn forward_offsets(k: usize) -> Vec<[i32; 3]> {
    let k = k as i32;
    let mut v = Vec::with_capacity((k * k * k) as usize);
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                v.push([a, b, c]);
            }
        }
    }
    v
}

/// Connectivity of one convolution: per tap, `(input row, output row)` pairs
/// sorted by output row.
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub taps: Vec<Vec<(usize, usize)>>,
    pub n_in: usize,
    pub n_out: usize,
}

/// Output support and rulebook of a convolution from `input` onto
/// `out_coords` (stride `out_stride`) with a centered odd kernel whose taps
/// step by the input stride.
fn centered_rulebook(input: &SparseTensor, out_coords: &[Coord], k: usize) -> Rulebook {
    let s = input.stride;
    let offsets = centered_offsets(k);
    let mut taps = vec![Vec::new(); offsets.len()];
    for (o_row, o) in out_coords.iter().enumerate() {
        for (t, d) in offsets.iter().enumerate() {
            let n = [o[0] + d[0] * s, o[1] + d[1] * s, o[2] + d[2] * s];
            if let Some(i_row) = input.row_of(&n) {
                taps[t].push((i_row, o_row));
            }
        }
    }
    Rulebook { taps, n_in: input.len(), n_out: out_coords.len() }
}

/// Rulebook for a convolution; `stride_out` 1 is submanifold, 2 downsamples.
pub fn conv_rulebook(input: &SparseTensor, k: usize, stride_out: i32) -> Result<(Vec<Coord>, i32, Rulebook)> {
    if k % 2 == 0 {
        return Err(LodeError::Config(format!("convolution kernel size must be odd, got {k}")));
    }
    match stride_out {
        1 => {
            let coords = input.coords.clone();
            let rb = centered_rulebook(input, &coords, k);
            Ok((coords, input.stride, rb))
        }
        2 => {
            let s2 = input.stride * 2;
            let coords: Vec<Coord> = input
                .coords
                .iter()
                .map(|c| [c[0].div_euclid(s2) * s2, c[1].div_euclid(s2) * s2, c[2].div_euclid(s2) * s2])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let rb = centered_rulebook(input, &coords, k);
            Ok((coords, s2, rb))
        }
        other => Err(LodeError::Config(format!("stride_out must be 1 or 2, got {other}"))),
    }
}

/// Rulebook for a generative transposed convolution. Every input coordinate
/// emits its full `k^3` footprint at the finer stride; footprint cells outside
/// `bounds` (base-grid dims) are discarded when bounds are given.
pub fn deconv_rulebook(
    input: &SparseTensor,
    k: usize,
    factor: i32,
    bounds: Option<[usize; 3]>,
) -> Result<(Vec<Coord>, i32, Rulebook)> {
    if factor < 1 || input.stride % factor != 0 {
        return Err(LodeError::StrideNotDivisible { stride: input.stride, factor });
    }
    let s_out = input.stride / factor;
    let offsets = forward_offsets(k);
    let in_bounds = |c: &Coord| match bounds {
        Some(b) => (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < b[a]),
        None => true,
    };
    let mut out_set = BTreeSet::new();
    for c in &input.coords {
        for d in &offsets {
            let o = [c[0] + d[0] * s_out, c[1] + d[1] * s_out, c[2] + d[2] * s_out];
            if in_bounds(&o) {
                out_set.insert(o);
            }
        }
    }
    let coords: Vec<Coord> = out_set.into_iter().collect();
    let out_index: HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut taps = vec![Vec::new(); offsets.len()];
    for (i_row, c) in input.coords.iter().enumerate() {
        for (t, d) in offsets.iter().enumerate() {
            let o = [c[0] + d[0] * s_out, c[1] + d[1] * s_out, c[2] + d[2] * s_out];
            if let Some(&o_row) = out_index.get(&o) {
                taps[t].push((i_row, o_row));
            }
        }
    }
    for tap in taps.iter_mut() {
        tap.sort_by_key(|&(i, o)| (o, i));
    }
    let n_out = coords.len();
    Ok((coords, s_out, Rulebook { taps, n_in: input.len(), n_out }))
}

/// Runs a rulebook forward: `out[o] = bias + sum over taps of in[i] * W_tap`.
pub fn apply_rulebook(features: &Array2<f64>, rb: &Rulebook, kernel: &ConvKernel) -> Result<Array2<f64>> {
    kernel.check_shape()?;
    if features.ncols() != kernel.in_channels() {
        return Err(LodeError::ChannelMismatch { expected: kernel.in_channels(), got: features.ncols() });
    }
    if kernel.weights.len() != rb.taps.len() {
        return Err(LodeError::Config("kernel/rulebook tap count mismatch".into()));
    }
    let mut out = Array2::zeros((rb.n_out, kernel.out_channels()));
    out.rows_mut().into_iter().for_each(|mut r| r.assign(&kernel.bias));
    for (pairs, w) in rb.taps.iter().zip(&kernel.weights) {
        if pairs.is_empty() {
            continue;
        }
        let in_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let contrib = features.select(Axis(0), &in_rows).dot(w);
        for (row, &(_, o)) in contrib.rows().into_iter().zip(pairs) {
            let mut dst = out.row_mut(o);
            dst += &row;
        }
    }
    Ok(out)
}

/// Gradient of a rulebook application w.r.t. its input features and kernel.
pub fn rulebook_backward(
    features: &Array2<f64>,
    rb: &Rulebook,
    kernel: &ConvKernel,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, ConvKernel) {
    let mut grad_in = Array2::zeros(features.dim());
    let mut gk = ConvKernel::zeros(kernel.size, kernel.in_channels(), kernel.out_channels());
    gk.bias = grad_out.sum_axis(Axis(0));
    for ((pairs, w), gw) in rb.taps.iter().zip(&kernel.weights).zip(gk.weights.iter_mut()) {
        if pairs.is_empty() {
            continue;
        }
        let in_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let out_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let x = features.select(Axis(0), &in_rows);
        let g = grad_out.select(Axis(0), &out_rows);
        *gw += &x.t().dot(&g);
        let back = g.dot(&w.t());
        for (row, &i) in back.rows().into_iter().zip(&in_rows) {
            let mut dst = grad_in.row_mut(i);
            dst += &row;
        }
    }
    (grad_in, gk)
}

/// Sparse convolution: `stride_out` 1 keeps the coordinate set (submanifold),
/// 2 maps onto the occupied cells of the twice-coarser lattice.
pub fn sparse_conv(t: &SparseTensor, kernel: &ConvKernel, stride_out: i32) -> Result<SparseTensor> {
    if t.channels() != kernel.in_channels() {
        return Err(LodeError::ChannelMismatch { expected: kernel.in_channels(), got: t.channels() });
    }
    let (coords, stride, rb) = conv_rulebook(t, kernel.size, stride_out)?;
    let feats = apply_rulebook(&t.features, &rb, kernel)?;
    Ok(SparseTensor::from_sorted(stride, coords, feats))
}

/// Generative transposed convolution: support dilates to the full footprint.
pub fn generative_deconv(t: &SparseTensor, kernel: &ConvKernel, factor: i32) -> Result<SparseTensor> {
    generative_deconv_bounded(t, kernel, factor, None)
}

pub fn generative_deconv_bounded(
    t: &SparseTensor,
    kernel: &ConvKernel,
    factor: i32,
    bounds: Option<[usize; 3]>,
) -> Result<SparseTensor> {
    if t.channels() != kernel.in_channels() {
        return Err(LodeError::ChannelMismatch { expected: kernel.in_channels(), got: t.channels() });
    }
    let (coords, stride, rb) = deconv_rulebook(t, kernel.size, factor, bounds)?;
    let feats = apply_rulebook(&t.features, &rb, kernel)?;
    Ok(SparseTensor::from_sorted(stride, coords, feats))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows whose keep probability `sigmoid(logit)` reaches `threshold`.
pub fn prune_mask(keep_logits: &[f64], threshold: f64) -> Vec<usize> {
    keep_logits.iter().enumerate().filter(|(_, &l)| sigmoid(l) >= threshold).map(|(i, _)| i).collect()
}

pub fn prune(t: &SparseTensor, keep_logits: &[f64], threshold: f64) -> Result<SparseTensor> {
    if keep_logits.len() != t.len() {
        return Err(LodeError::LengthMismatch { expected: t.len(), got: keep_logits.len() });
    }
    Ok(t.select_rows(&prune_mask(keep_logits, threshold)))
}

/// Max-pools occupancy by `factor` per axis.
pub fn downsample_occupancy(occ: &OccupancyVolume, factor: usize) -> Result<OccupancyVolume> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(LodeError::Config(format!("factor must be a power of two, got {factor}")));
    }
    let g = &occ.grid;
    if g.dims.iter().any(|d| d % factor != 0) {
        return Err(LodeError::IndivisibleDims { dims: g.dims, factor });
    }
    let coarse = GridConfig {
        origin: g.origin,
        voxel_edge: g.voxel_edge * factor as f64,
        dims: [g.dims[0] / factor, g.dims[1] / factor, g.dims[2] / factor],
    };
    let f = factor as i32;
    let occupied = occ.occupied.iter().map(|c| [c[0] / f, c[1] / f, c[2] / f]).collect();
    Ok(OccupancyVolume { grid: coarse, occupied })
}

/// Dense `(D, W, H, C)` copy, indexing coordinates on the tensor's own lattice
/// (`coord / stride`).
pub fn to_dense(t: &SparseTensor, dims: [usize; 3]) -> Result<Array4<f64>> {
    let mut out = Array4::zeros((dims[0], dims[1], dims[2], t.channels()));
    for (c, row) in t.coords.iter().zip(t.features.rows()) {
        let idx = [c[0] / t.stride, c[1] / t.stride, c[2] / t.stride];
        if (0..3).any(|a| idx[a] < 0 || idx[a] as usize >= dims[a]) {
            return Err(LodeError::OutOfRange { index: *c, dims });
        }
        out.slice_mut(ndarray::s![idx[0] as usize, idx[1] as usize, idx[2] as usize, ..]).assign(&row);
    }
    Ok(out)
}

/// Sparse tensor holding every lattice cell of `dense` with a nonzero feature row.
pub fn from_dense(dense: &Array4<f64>, stride: i32) -> SparseTensor {
    let (d, w, h, c) = dense.dim();
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    for i in 0..d {
        for j in 0..w {
            for k in 0..h {
                let row = dense.slice(ndarray::s![i, j, k, ..]);
                if row.iter().any(|&v| v != 0.0) {
                    coords.push([i as i32 * stride, j as i32 * stride, k as i32 * stride]);
                    rows.extend(row.iter().copied());
                }
            }
        }
    }
    let n = coords.len();
    SparseTensor::from_sorted(stride, coords, Array2::from_shape_vec((n, c), rows).expect("dense rows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, density: f64, channels: usize, stride: i32) -> SparseTensor {
        let mut coords = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if rng.random::<f64>() < density {
                        coords.push([i as i32 * stride, j as i32 * stride, k as i32 * stride]);
                    }
                }
            }
        }
        let feats = Array2::from_shape_fn((coords.len(), channels), |_| rng.random_range(-1.0..1.0));
        SparseTensor::new(stride, coords, feats).unwrap()
    }

    /// Dense convolution with a centered kernel: out[o] = b + sum_d in[o*step + d] W_d.
    fn dense_conv(input: &Array4<f64>, kernel: &ConvKernel, step: usize, out_dims: [usize; 3]) -> Array4<f64> {
        let (d, w, h, cin) = input.dim();
        let cout = kernel.out_channels();
        let r = (kernel.size / 2) as i64;
        let k = kernel.size as i64;
        let mut out = Array4::zeros((out_dims[0], out_dims[1], out_dims[2], cout));
        for oi in 0..out_dims[0] {
            for oj in 0..out_dims[1] {
                for ok in 0..out_dims[2] {
                    for co in 0..cout {
                        let mut acc = kernel.bias[co];
                        for a in -r..=r {
                            for b in -r..=r {
                                for c in -r..=r {
                                    let (x, y, z) =
                                        (oi as i64 * step as i64 + a, oj as i64 * step as i64 + b, ok as i64 * step as i64 + c);
                                    if x < 0 || y < 0 || z < 0 || x >= d as i64 || y >= w as i64 || z >= h as i64 {
                                        continue;
                                    }
                                    let tap = (((a + r) * k + (b + r)) * k + (c + r)) as usize;
                                    for ci in 0..cin {
                                        acc += input[[x as usize, y as usize, z as usize, ci]] * kernel.weights[tap][[ci, co]];
                                    }
                                }
                            }
                        }
                        out[[oi, oj, ok, co]] = acc;
                    }
                }
            }
        }
        out
    }

    /// Dense transposed convolution without padding: out[i*f + d] += in[i] W_d.
    fn dense_deconv(input: &Array4<f64>, kernel: &ConvKernel, f: usize) -> Array4<f64> {
        let (d, w, h, cin) = input.dim();
        let k = kernel.size;
        let cout = kernel.out_channels();
        let mut out = Array4::zeros(((d - 1) * f + k, (w - 1) * f + k, (h - 1) * f + k, cout));
        for i in 0..d {
            for j in 0..w {
                for l in 0..h {
                    for a in 0..k {
                        for b in 0..k {
                            for c in 0..k {
                                let tap = (a * k + b) * k + c;
                                for ci in 0..cin {
                                    let v = input[[i, j, l, ci]];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        out[[i * f + a, j * f + b, l * f + c, co]] += v * kernel.weights[tap][[ci, co]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_matches_dense(t: &SparseTensor, dense: &Array4<f64>, bias: &Array1<f64>, tol: f64) {
        for (c, row) in t.coords().iter().zip(t.features.rows()) {
            let s = t.stride();
            let idx = [(c[0] / s) as usize, (c[1] / s) as usize, (c[2] / s) as usize];
            for (ch, v) in row.iter().enumerate() {
                let expect = dense[[idx[0], idx[1], idx[2], ch]] + bias[ch];
                assert!((v - expect).abs() <= tol, "at {c:?} ch {ch}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn identity_kernel_preserves_single_voxel() {
        let t = SparseTensor::new(1, vec![[3, 4, 5]], Array2::from_elem((1, 2), 0.7)).unwrap();
        let mut k = ConvKernel::zeros(3, 2, 2);
        k.weights[13] = Array2::eye(2);
        let out = sparse_conv(&t, &k, 1).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn empty_tensor_stays_empty() {
        let t = SparseTensor::empty(1, 3);
        let k = ConvKernel::zeros(3, 3, 4);
        let out = sparse_conv(&t, &k, 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 4);
        assert!(sparse_conv(&t, &k, 2).unwrap().is_empty());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let t = SparseTensor::empty(1, 3);
        let k = ConvKernel::zeros(3, 2, 4);
        assert!(matches!(sparse_conv(&t, &k, 1), Err(LodeError::ChannelMismatch { .. })));
        let t2 = SparseTensor::empty(2, 3);
        assert!(matches!(generative_deconv(&t2, &ConvKernel::zeros(2, 2, 4), 2), Err(LodeError::ChannelMismatch { .. })));
    }

    #[test]
    fn submanifold_conv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_tensor(&mut rng, 8, 0.3, 2, 1);
        let k = ConvKernel::init_uniform(3, 2, 3, &mut rng);
        let out = sparse_conv(&t, &k, 1).unwrap();
        assert_eq!(out.coord_set(), t.coord_set());
        let dense = dense_conv(&to_dense(&t, [8, 8, 8]).unwrap(), &k, 1, [8, 8, 8]);
        // dense oracle includes bias already
        assert_matches_dense(&out, &dense, &Array1::zeros(3), 1e-5);
    }

    #[test]
    fn strided_conv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_tensor(&mut rng, 8, 0.2, 2, 1);
        let k = ConvKernel::init_uniform(3, 2, 2, &mut rng);
        let out = sparse_conv(&t, &k, 2).unwrap();
        assert_eq!(out.stride(), 2);
        let expect_coords: BTreeSet<Coord> =
            t.coords().iter().map(|c| [c[0] / 2 * 2, c[1] / 2 * 2, c[2] / 2 * 2]).collect();
        assert_eq!(out.coord_set(), expect_coords);
        let dense = dense_conv(&to_dense(&t, [8, 8, 8]).unwrap(), &k, 2, [4, 4, 4]);
        assert_matches_dense(&out, &dense, &Array1::zeros(2), 1e-5);
    }

    #[test]
    fn single_voxel_deconv_emits_full_footprint() {
        let t = SparseTensor::new(2, vec![[2, 2, 2]], Array2::ones((1, 1))).unwrap();
        let k = ConvKernel::zeros(2, 1, 1);
        let out = generative_deconv(&t, &k, 2).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.stride(), 1);
        assert!(out.coords().iter().all(|c| c.iter().all(|&v| v == 2 || v == 3)));
    }

    #[test]
    fn deconv_matches_dense_oracle_including_overlaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // k = 3 with factor 2 makes neighbouring footprints overlap
        let t = SparseTensor::new(2, vec![[0, 0, 0], [2, 0, 0]], Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        let k = ConvKernel::init_uniform(3, 2, 2, &mut rng);
        let out = generative_deconv(&t, &k, 2).unwrap();
        assert_eq!(out.len(), 5 * 3 * 3);
        let dense = dense_deconv(&to_dense(&t, [2, 1, 1]).unwrap(), &k, 2);
        assert_matches_dense(&out, &dense, &k.bias, 1e-5);
        for kk in [2usize, 3] {
            let t = random_tensor(&mut rng, 4, 0.3, 2, 2);
            let k = ConvKernel::init_uniform(kk, 2, 3, &mut rng);
            let out = generative_deconv(&t, &k, 2).unwrap();
            let dense = dense_deconv(&to_dense(&t, [4, 4, 4]).unwrap(), &k, 2);
            assert_matches_dense(&out, &dense, &k.bias, 1e-5);
        }
    }

    #[test]
    fn deconv_requires_divisible_stride() {
        let t = SparseTensor::empty(1, 1);
        assert!(matches!(
            generative_deconv(&t, &ConvKernel::zeros(2, 1, 1), 2),
            Err(LodeError::StrideNotDivisible { .. })
        ));
    }

    #[test]
    fn deconv_bounds_clip_footprint() {
        let t = SparseTensor::new(2, vec![[2, 2, 2]], Array2::ones((1, 1))).unwrap();
        let out = generative_deconv_bounded(&t, &ConvKernel::zeros(3, 1, 1), 2, Some([4, 4, 4])).unwrap();
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn prune_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 4, 0.5, 2, 1);
        let n = t.len();
        assert_eq!(prune(&t, &vec![f64::INFINITY; n], 0.5).unwrap(), t);
        assert!(prune(&t, &vec![f64::NEG_INFINITY; n], 0.5).unwrap().is_empty());
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let kept = prune(&t, &logits, 0.5).unwrap();
        let expect: BTreeSet<Coord> = (0..n).filter(|&i| logits[i] >= 0.0).map(|i| t.coords()[i]).collect();
        assert_eq!(kept.coord_set(), expect);
        let again_logits: Vec<f64> =
            kept.coords().iter().map(|c| logits[t.row_of(c).unwrap()]).collect();
        assert_eq!(prune(&kept, &again_logits, 0.5).unwrap(), kept);
        assert!(matches!(prune(&t, &[0.0], 0.5), Err(LodeError::LengthMismatch { .. })));
    }

    #[test]
    fn downsample_cases() {
        let g = GridConfig::new([0.0; 3], 0.2, [16, 16, 16]).unwrap();
        let occ = OccupancyVolume::from_indices(g, [[5, 9, 15]]).unwrap();
        assert_eq!(downsample_occupancy(&occ, 1).unwrap().occupied, occ.occupied);
        let c = downsample_occupancy(&occ, 4).unwrap();
        assert_eq!(c.occupied.into_iter().collect::<Vec<_>>(), vec![[1, 2, 3]]);
        let odd = GridConfig::new([0.0; 3], 0.2, [6, 8, 8]).unwrap();
        assert!(matches!(
            downsample_occupancy(&OccupancyVolume::empty(odd), 4),
            Err(LodeError::IndivisibleDims { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx: Vec<Coord> = (0..200).map(|_| [rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16)]).collect();
        let occ = OccupancyVolume::from_indices(g, idx).unwrap();
        let c = downsample_occupancy(&occ, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let mut any = false;
                    for a in 0..4 {
                        for b in 0..4 {
                            for d in 0..4 {
                                any |= occ.contains(&[i * 4 + a, j * 4 + b, k * 4 + d]);
                            }
                        }
                    }
                    assert_eq!(c.contains(&[i, j, k]), any);
                }
            }
        }
    }

    #[test]
    fn dense_round_trips() {
        let t = SparseTensor::empty(1, 2);
        assert!(to_dense(&t, [3, 3, 3]).unwrap().iter().all(|&v| v == 0.0));
        let one = SparseTensor::new(1, vec![[1, 2, 0]], Array2::from_elem((1, 2), 2.0)).unwrap();
        let d = to_dense(&one, [3, 3, 3]).unwrap();
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 2);
        assert_eq!(from_dense(&d, 1), one);
        assert!(to_dense(&one, [1, 1, 1]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = random_tensor(&mut rng, 4, 0.4, 2, 1);
        let k = ConvKernel::init_uniform(3, 2, 2, &mut rng);
        let (_, _, rb) = conv_rulebook(&t, 3, 2).unwrap();
        let upstream = Array2::from_shape_fn((rb.n_out, 2), |_| rng.random_range(-1.0..1.0));
        let loss = |feats: &Array2<f64>, k: &ConvKernel| (apply_rulebook(feats, &rb, k).unwrap() * &upstream).sum();
        let (gin, gk) = rulebook_backward(&t.features, &rb, &k, &upstream);
        let h = 1e-6;
        for idx in [(0usize, 0usize), (t.len() - 1, 1)] {
            let mut p = t.features.clone();
            p[idx] += h;
            let mut m = t.features.clone();
            m[idx] -= h;
            let fd = (loss(&p, &k) - loss(&m, &k)) / (2.0 * h);
            assert!((fd - gin[idx]).abs() < 1e-6);
        }
        let flat = k.flat();
        let gflat = gk.flat();
        for i in (0..flat.len()).step_by(7) {
            let mut kp = k.clone();
            let mut v = flat.clone();
            v[i] += h;
            kp.set_flat(&v);
            let mut km = k.clone();
            v[i] -= 2.0 * h;
            km.set_flat(&v);
            let fd = (loss(&t.features, &kp) - loss(&t.features, &km)) / (2.0 * h);
            assert!((fd - gflat[i]).abs() < 1e-6, "param {i}: {fd} vs {}", gflat[i]);
        }
    }

    #[test]
    fn debug_dump_lists_rows() {
        let t = SparseTensor::new(1, vec![[0, 1, 2]], Array2::from_elem((1, 1), 0.5)).unwrap();
        let mut buf = Vec::new();
        t.debug_dump(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("0 1 2 0.5"));
    }
}
