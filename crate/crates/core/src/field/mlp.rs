//! Sine (or ReLU) multilayer perceptron with forward-mode input tangents and
//! a matching reverse pass.
//!
//! Hidden layer `j` computes `act(s_j (W_j z + b_j))` where `s_0 = omega_0`,
//! deeper sine layers use `hidden_omega`, and the output layer is affine with
//! scale 1. The tangent pass carries `dz/dx` for three input directions so the
//! spatial gradient of the output is exact; the reverse pass differentiates
//! through both the values and the tangents.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sine,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
    pub omega_0: f64,
    pub hidden_omega: f64,
}

pub type MlpGrad = Vec<DenseLayer>;

impl MlpParameters {
    /// Sine network: first layer uniform +-1/fan_in, deeper layers
    /// +-sqrt(6/fan_in)/omega, biases +-1/sqrt(fan_in).
    pub fn new_sine<R: Rng>(inputs: usize, hidden: usize, depth: usize, outputs: usize, omega_0: f64, rng: &mut R) -> Self {
        let dims = layer_dims(inputs, hidden, depth, outputs);
        let layers = dims
            .iter()
            .enumerate()
            .map(|(j, &(i, o))| {
                let bound = if j == 0 { 1.0 / i as f64 } else { (6.0 / i as f64).sqrt() / omega_0 };
                uniform_layer(i, o, bound, 1.0 / (i as f64).sqrt(), rng)
            })
            .collect();
        Self { layers, activation: Activation::Sine, omega_0, hidden_omega: omega_0 }
    }

    /// ReLU network with He-uniform weights and zero biases.
    pub fn new_relu<R: Rng>(inputs: usize, hidden: usize, depth: usize, outputs: usize, rng: &mut R) -> Self {
        let layers = layer_dims(inputs, hidden, depth, outputs)
            .iter()
            .map(|&(i, o)| uniform_layer(i, o, (6.0 / i as f64).sqrt(), 0.0, rng))
            .collect();
        Self { layers, activation: Activation::Relu, omega_0: 1.0, hidden_omega: 1.0 }
    }

    pub fn from_layers(layers: Vec<DenseLayer>, activation: Activation, omega_0: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(LodeError::Config("mlp needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(LodeError::Config("mlp layer widths do not chain".into()));
            }
        }
        let hidden_omega = if activation == Activation::Sine { omega_0 } else { 1.0 };
        Ok(Self { layers, activation, omega_0, hidden_omega })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    fn scale(&self, j: usize) -> f64 {
        if j + 1 == self.layers.len() {
            1.0
        } else if j == 0 {
            self.omega_0
        } else {
            self.hidden_omega
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_grad(&self) -> MlpGrad {
        self.layers.iter().map(|l| DenseLayer::zeros(l.inputs(), l.outputs())).collect()
    }

    /// Evaluates one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.inputs() {
            return Err(LodeError::ChannelMismatch { expected: self.inputs(), got: input.len() });
        }
        let z = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        Ok(self.forward_batch(&z).row(0).to_vec())
    }

    /// Evaluates a `B x inputs` batch.
    pub fn forward_batch(&self, z0: &Array2<f64>) -> Array2<f64> {
        let mut z = z0.clone();
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            let mut pre = z.dot(&layer.weight.t());
            pre += &layer.bias;
            if j < last {
                let s = self.scale(j);
                pre.mapv_inplace(|a| self.act(s * a));
            }
            z = pre;
        }
        z
    }

    fn act(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Sine => a.sin(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Forward pass keeping activations for [`MlpParameters::backward_values`].
    pub fn forward_cached(&self, z0: Array2<f64>) -> ValueTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut z = z0;
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            let s = self.scale(j);
            let mut pre = z.dot(&layer.weight.t());
            pre += &layer.bias;
            pre *= s;
            let next = if j < last { pre.mapv(|a| self.act(a)) } else { pre.clone() };
            inputs.push(z);
            pres.push(pre);
            z = next;
        }
        ValueTape { inputs, pres, output: z }
    }

    /// Reverse pass of a value-only forward; returns parameter and input gradients.
    pub fn backward_values(&self, tape: &ValueTape, grad_out: &Array2<f64>) -> (MlpGrad, Array2<f64>) {
        let mut grads = self.zero_grad();
        let mut g = grad_out.clone();
        let last = self.layers.len() - 1;
        for j in (0..self.layers.len()).rev() {
            let s = self.scale(j);
            let pre = &tape.pres[j];
            let mut gpre = g;
            if j < last {
                self.apply_act_derivative(pre, &mut gpre);
            }
            gpre *= s;
            grads[j].weight = gpre.t().dot(&tape.inputs[j]);
            grads[j].bias = gpre.sum_axis(Axis(0));
            g = gpre.dot(&self.layers[j].weight);
        }
        (grads, g)
    }

    fn apply_act_derivative(&self, pre: &Array2<f64>, g: &mut Array2<f64>) {
        match self.activation {
            Activation::Sine => Zip::from(g).and(pre).for_each(|g, &a| *g *= a.cos()),
            Activation::Relu => Zip::from(g).and(pre).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
        }
    }

    /// Forward pass carrying three input tangents `t0[k] = dz0/dx_k`.
    pub fn forward_tangent(&self, z0: Array2<f64>, t0: [Array2<f64>; 3]) -> TangentTape {
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut z = z0;
        let mut t = t0;
        for (j, layer) in self.layers.iter().enumerate() {
            let s = self.scale(j);
            let wt = layer.weight.t();
            let mut pre = z.dot(&wt);
            pre += &layer.bias;
            pre *= s;
            let dpre: [Array2<f64>; 3] = [0, 1, 2].map(|k| {
                let mut d = t[k].dot(&wt);
                d *= s;
                d
            });
            let (next, dnext) = if j < last {
                let h = pre.mapv(|a| self.act(a));
                let deriv = match self.activation {
                    Activation::Sine => pre.mapv(f64::cos),
                    Activation::Relu => pre.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 }),
                };
                let dh = [0, 1, 2].map(|k| &dpre[k] * &deriv);
                (h, dh)
            } else {
                (pre.clone(), dpre.clone())
            };
            caches.push(TangentCache { z, t, pre, dpre });
            z = next;
            t = dnext;
        }
        TangentTape { caches, output: z, doutput: t }
    }

    /// Reverse pass over the value-and-tangent computation.
    ///
    /// `grad_out` is dL/d output and `grad_dout[k]` is dL/d (d output / dx_k).
    /// Returns parameter gradients plus dL/dz0 and dL/dt0.
    pub fn backward_tangent(
        &self,
        tape: &TangentTape,
        grad_out: &Array2<f64>,
        grad_dout: &[Array2<f64>; 3],
    ) -> (MlpGrad, Array2<f64>, [Array2<f64>; 3]) {
        let mut grads = self.zero_grad();
        let last = self.layers.len() - 1;
        let mut gz = grad_out.clone();
        let mut gt = grad_dout.clone();
        for j in (0..self.layers.len()).rev() {
            let c = &tape.caches[j];
            let s = self.scale(j);
            let (mut gpre, mut gdpre) = if j < last {
                match self.activation {
                    Activation::Sine => {
                        let cos = c.pre.mapv(f64::cos);
                        let sin = c.pre.mapv(f64::sin);
                        let mut gpre = &gz * &cos;
                        for k in 0..3 {
                            Zip::from(&mut gpre).and(&sin).and(&c.dpre[k]).and(&gt[k]).for_each(|g, &sn, &dp, &gd| {
                                *g -= sn * dp * gd;
                            });
                        }
                        let gdpre = [0, 1, 2].map(|k| &gt[k] * &cos);
                        (gpre, gdpre)
                    }
                    Activation::Relu => {
                        let mask = c.pre.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                        let gpre = &gz * &mask;
                        let gdpre = [0, 1, 2].map(|k| &gt[k] * &mask);
                        (gpre, gdpre)
                    }
                }
            } else {
                (gz, gt)
            };
            gpre *= s;
            for d in gdpre.iter_mut() {
                *d *= s;
            }
            let mut gw = gpre.t().dot(&c.z);
            for k in 0..3 {
                gw += &gdpre[k].t().dot(&c.t[k]);
            }
            grads[j].weight = gw;
            grads[j].bias = gpre.sum_axis(Axis(0));
            let w = &self.layers[j].weight;
            gz = gpre.dot(w);
            gt = [0, 1, 2].map(|k| gdpre[k].dot(w));
        }
        (grads, gz, gt)
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for l in self.layers.iter_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = it.next().expect("flat mlp length"));
        }
    }
}

pub fn flatten_layers(layers: &[DenseLayer]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend(l.weight.iter().copied());
        v.extend(l.bias.iter().copied());
    }
    v
}

pub fn add_grad(acc: &mut MlpGrad, g: &MlpGrad) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

fn layer_dims(inputs: usize, hidden: usize, depth: usize, outputs: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(depth + 1);
    let mut prev = inputs;
    for _ in 0..depth {
        dims.push((prev, hidden));
        prev = hidden;
    }
    dims.push((prev, outputs));
    dims
}

fn uniform_layer<R: Rng>(inputs: usize, outputs: usize, w_bound: f64, b_bound: f64, rng: &mut R) -> DenseLayer {
    let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-w_bound..w_bound));
    let bias = if b_bound > 0.0 {
        Array1::from_shape_fn(outputs, |_| rng.random_range(-b_bound..b_bound))
    } else {
        Array1::zeros(outputs)
    };
    DenseLayer { weight, bias }
}

pub struct ValueTape {
    inputs: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

struct TangentCache {
    z: Array2<f64>,
    t: [Array2<f64>; 3],
    pre: Array2<f64>,
    dpre: [Array2<f64>; 3],
}

pub struct TangentTape {
    caches: Vec<TangentCache>,
    pub output: Array2<f64>,
    pub doutput: [Array2<f64>; 3],
}
