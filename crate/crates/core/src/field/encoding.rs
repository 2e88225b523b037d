//! Multi-octave sinusoidal encoding of normalized coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::grid::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingConfig {
    pub enabled: bool,
    pub levels: usize,
    pub include_xyz: bool,
}

impl Default for PositionalEncodingConfig {
    fn default() -> Self {
        Self { enabled: true, levels: 10, include_xyz: false }
    }
}

impl PositionalEncodingConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, levels: 10, include_xyz: false }
    }

    /// Encoded width: `6L` (+3 with raw coordinates), or 3 when disabled.
    pub fn width(&self) -> usize {
        if !self.enabled {
            3
        } else {
            6 * self.levels + if self.include_xyz { 3 } else { 0 }
        }
    }
}

/// Per component `p`: `(sin 2^0 pi p, cos 2^0 pi p, ..., sin 2^(L-1) pi p, cos 2^(L-1) pi p)`,
/// concatenated over x, y, z. A disabled config passes the coordinates through.
pub fn positional_encode(u: &Vec3, cfg: &PositionalEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.width());
    encode_into(u, cfg, &mut out, None);
    out
}

/// Encoding plus its derivative: `jac[f]` is `d out[f] / d u[axis[f]]`, and
/// each output feature depends on exactly one input axis.
pub(crate) fn encode_with_derivative(u: &Vec3, cfg: &PositionalEncodingConfig) -> (Vec<f64>, Vec<(usize, f64)>) {
    let mut out = Vec::with_capacity(cfg.width());
    let mut jac = Vec::with_capacity(cfg.width());
    encode_into(u, cfg, &mut out, Some(&mut jac));
    (out, jac)
}

fn encode_into(u: &Vec3, cfg: &PositionalEncodingConfig, out: &mut Vec<f64>, mut jac: Option<&mut Vec<(usize, f64)>>) {
    if !cfg.enabled || cfg.include_xyz {
        for a in 0..3 {
            out.push(u[a]);
            if let Some(j) = jac.as_deref_mut() {
                j.push((a, 1.0));
            }
        }
        if !cfg.enabled {
            return;
        }
    }
    for a in 0..3 {
        let p = u[a];
        let mut freq = PI;
        for _ in 0..cfg.levels {
            let (s, c) = (freq * p).sin_cos();
            out.push(s);
            out.push(c);
            if let Some(j) = jac.as_deref_mut() {
                j.push((a, freq * c));
                j.push((a, -freq * s));
            }
            freq *= 2.0;
        }
    }
}
