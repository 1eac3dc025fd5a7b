//! Gated convolution and spectrally normalized convolution layers.
//!
//! Layer structs are generic over their parameter slot `P`: `Tensor` for
//! stored weights, [`Var`] once bound into a [`Graph`], and `Tensor` again
//! for gradients or optimizer state. `map` converts between the forms and
//! `visit` walks parameters in a fixed order with stable names.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

/// Uniform He-style initializer for a conv weight.
pub(crate) fn init_weight(spec: &ConvSpec, gain: f32, rng: &mut impl Rng) -> Tensor {
    let bound = gain * (3.0 / spec.fan_in() as f32).sqrt();
    Tensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-bound..bound))
}

/// Plain convolution with bias and optional ELU.
#[derive(Debug, Clone)]
pub struct ConvLayer<P = Tensor> {
    pub spec: ConvSpec,
    pub activation: Activation,
    pub weight: P,
    pub bias: P,
}

impl ConvLayer<Tensor> {
    pub fn init(spec: ConvSpec, activation: Activation, rng: &mut impl Rng) -> Self {
        let weight = init_weight(&spec, std::f32::consts::SQRT_2, rng);
        let bias = Tensor::zeros(&[spec.out_channels]);
        Self {
            spec,
            activation,
            weight,
            bias,
        }
    }
}

impl<P> ConvLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> ConvLayer<Q> {
        ConvLayer {
            spec: self.spec.clone(),
            activation: self.activation,
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (n, p) in self.params_mut(prefix) {
            f(&n, p);
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &P)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    /// Named mutable parameter slots in visiting order.
    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut P)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

impl ConvLayer<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.conv(x, self.weight, self.bias, &self.spec)?;
        Ok(match self.activation {
            Activation::Elu => g.elu(y),
            Activation::Identity => y,
        })
    }
}

/// `features = act(conv_f(x)) * sigmoid(conv_g(x))`.
#[derive(Debug, Clone)]
pub struct GatedConvLayer<P = Tensor> {
    pub spec: ConvSpec,
    pub activation: Activation,
    pub feature_weight: P,
    pub feature_bias: P,
    pub gate_weight: P,
    pub gate_bias: P,
}

/// Output of a gated convolution: modulated features and the sigmoid gate.
#[derive(Debug, Clone, Copy)]
pub struct GatedOutput {
    pub features: Var,
    pub soft_gate: Var,
}

impl GatedConvLayer<Tensor> {
    pub fn init(spec: ConvSpec, activation: Activation, rng: &mut impl Rng) -> Self {
        let gain = match activation {
            Activation::Elu => std::f32::consts::SQRT_2,
            Activation::Identity => 1.0,
        };
        let feature_weight = init_weight(&spec, gain, rng);
        let gate_weight = init_weight(&spec, 1.0, rng);
        Self {
            feature_bias: Tensor::zeros(&[spec.out_channels]),
            gate_bias: Tensor::zeros(&[spec.out_channels]),
            spec,
            activation,
            feature_weight,
            gate_weight,
        }
    }

    /// Evaluates the layer on `[N,Ci,H,W]` without recording gradients.
    pub fn apply(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.map("", &mut |_, t| g.input(t.clone()));
        let xv = g.input(x.clone());
        let out = bound.forward(&mut g, xv)?;
        Ok((g.value(out.features).clone(), g.value(out.soft_gate).clone()))
    }
}

impl<P> GatedConvLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> GatedConvLayer<Q> {
        GatedConvLayer {
            spec: self.spec.clone(),
            activation: self.activation,
            feature_weight: f(&format!("{prefix}.feature_weight"), &self.feature_weight),
            feature_bias: f(&format!("{prefix}.feature_bias"), &self.feature_bias),
            gate_weight: f(&format!("{prefix}.gate_weight"), &self.gate_weight),
            gate_bias: f(&format!("{prefix}.gate_bias"), &self.gate_bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (n, p) in self.params_mut(prefix) {
            f(&n, p);
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &P)> {
        vec![
            (format!("{prefix}.feature_weight"), &self.feature_weight),
            (format!("{prefix}.feature_bias"), &self.feature_bias),
            (format!("{prefix}.gate_weight"), &self.gate_weight),
            (format!("{prefix}.gate_bias"), &self.gate_bias),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut P)> {
        vec![
            (format!("{prefix}.feature_weight"), &mut self.feature_weight),
            (format!("{prefix}.feature_bias"), &mut self.feature_bias),
            (format!("{prefix}.gate_weight"), &mut self.gate_weight),
            (format!("{prefix}.gate_bias"), &mut self.gate_bias),
        ]
    }
}

impl GatedConvLayer<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<GatedOutput> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "gated_conv",
                format!("input has {c} channels, layer expects {}", self.spec.in_channels),
            ));
        }
        let f = g.conv(x, self.feature_weight, self.feature_bias, &self.spec)?;
        let f = match self.activation {
            Activation::Elu => g.elu(f),
            Activation::Identity => f,
        };
        let gate = g.conv(x, self.gate_weight, self.gate_bias, &self.spec)?;
        let soft_gate = g.sigmoid(gate);
        let features = g.mul(f, soft_gate)?;
        Ok(GatedOutput { features, soft_gate })
    }
}

/// Power-iteration state for one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState {
    /// Left singular-vector estimate, length = out channels.
    pub u: Vec<f32>,
    pub power_iterations: usize,
}

/// Result of one normalization.
#[derive(Debug, Clone)]
pub struct NormalizedWeight {
    pub weight: Tensor,
    pub sigma: f32,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    /// Set when the weight is (numerically) zero and was returned unchanged.
    pub degenerate: bool,
}

const SIGMA_FLOOR: f32 = 1e-12;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl SpectralNormState {
    pub fn new(rows: usize, power_iterations: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if normalize(&mut u) == 0.0 {
            u[0] = 1.0;
        }
        Self {
            u: u.into_iter().map(|x| x as f32).collect(),
            power_iterations: power_iterations.max(1),
        }
    }

    /// Runs the power iteration on `weight` viewed as `[rows, rest]`,
    /// updating `u`. Returns `(u, v, sigma, degenerate)`.
    pub fn step(&mut self, weight: &Tensor) -> Result<(Vec<f32>, Vec<f32>, f32, bool)> {
        let rows = weight.shape()[0];
        if rows != self.u.len() {
            return Err(Error::shape(
                "spectral_norm",
                format!("u has {} entries, weight has {rows} rows", self.u.len()),
            ));
        }
        let cols = weight.len() / rows;
        let w = weight.data();
        let mut u: Vec<f64> = self.u.iter().map(|&x| x as f64).collect();
        let mut v = vec![0.0f64; cols];
        let mut degenerate = false;
        for _ in 0..self.power_iterations {
            v.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                for (vc, &wv) in v.iter_mut().zip(row) {
                    *vc += wv as f64 * u[r];
                }
            }
            if normalize(&mut v) <= SIGMA_FLOOR as f64 {
                degenerate = true;
                break;
            }
            for (r, ur) in u.iter_mut().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                *ur = row.iter().zip(&v).map(|(&a, &b)| a as f64 * b).sum();
            }
            if normalize(&mut u) <= SIGMA_FLOOR as f64 {
                degenerate = true;
                break;
            }
        }
        let mut sigma = 0.0f64;
        if !degenerate {
            for (r, &ur) in u.iter().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                sigma += ur * row.iter().zip(&v).map(|(&a, &b)| a as f64 * b).sum::<f64>();
            }
            self.u = u.iter().map(|&x| x as f32).collect();
        }
        let sigma = (sigma as f32).max(SIGMA_FLOOR);
        Ok((
            self.u.clone(),
            v.iter().map(|&x| x as f32).collect(),
            sigma,
            degenerate || sigma <= SIGMA_FLOOR,
        ))
    }

    /// `weight / sigma_hat`, or the weight unchanged when degenerate.
    pub fn normalize(&mut self, weight: &Tensor) -> Result<NormalizedWeight> {
        let (u, v, sigma, degenerate) = self.step(weight)?;
        let weight = if degenerate {
            weight.clone()
        } else {
            weight.map(|x| x / sigma)
        };
        Ok(NormalizedWeight {
            weight,
            sigma,
            u,
            v,
            degenerate,
        })
    }
}
