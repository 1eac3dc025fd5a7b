//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because a node can only reference earlier nodes.
//! Gradients live in the returned [`Gradients`] rather than on the tensors.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sign convention for the reference shift inside a cost volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Target is the left view; reference (right) features move by `+d`.
    RefIsRight,
    /// Target is the right view; reference (left) features move by `-d`.
    RefIsLeft,
}

impl ShiftDirection {
    pub fn sign(self) -> isize {
        match self {
            ShiftDirection::RefIsRight => 1,
            ShiftDirection::RefIsLeft => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            ShiftDirection::RefIsRight => ShiftDirection::RefIsLeft,
            ShiftDirection::RefIsLeft => ShiftDirection::RefIsRight,
        }
    }
}

type Derivative = Box<dyn Fn(f32, f32) -> f32 + Send + Sync>;

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<Vec<f32>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Elu(Var),
    LeakyRelu(Var, f32),
    Clamp(Var, f32, f32),
    Abs(Var),
    Log(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MaxAxis {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Shift(Var, isize),
    Down2(Var),
    Up2(Var),
    Reshape(Var),
    CostVolume {
        target: Var,
        reference: Var,
        levels: usize,
        sign: isize,
    },
    SpectralNorm {
        weight: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
    Custom(Var, Derivative),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// View of a shape as `[outer, axis, inner]` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, f)
            .map_err(|_| {
                Error::shape(
                    name,
                    format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
                )
            })?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let (value, geom, cols) = conv::conv_forward(self.value(input), self.value(weight), self.value(bias), spec)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// `[N,C,H,W]` cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        if spec.kernel_dims.len() != 2 {
            return Err(Error::invalid("conv2d needs two kernel dims"));
        }
        self.conv(input, weight, bias, spec)
    }

    /// `[N,C,D,H,W]` cross-correlation with zero padding.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        if spec.kernel_dims.len() != 3 {
            return Err(Error::invalid("conv3d needs three kernel dims"));
        }
        self.conv(input, weight, bias, spec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Adds a per-channel bias `[C]` to a tensor whose axis 1 has size `C`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = self.shape(bias);
        if shape.len() < 2 || c != [shape[1]] {
            return Err(Error::shape("add_bias", format!("{shape:?} with bias {c:?}")));
        }
        let (outer, ch, inner) = split_axis(&shape, 1);
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                for v in &mut out.data_mut()[(o * ch + c) * inner..(o * ch + c + 1) * inner] {
                    *v += b[c];
                }
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    /// Elementwise map with a caller-supplied derivative `d(x, y)` where
    /// `y = f(x)`.
    pub fn custom(
        &mut self,
        a: Var,
        f: impl Fn(f32) -> f32,
        derivative: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Custom(a, Box::new(derivative)), rg)
    }

    /// Sum of all elements as a `[1]` tensor, accumulated in `f64`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sums over `axis`, removing it (a rank-1 input collapses to `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    /// Maximum over `axis`, removing it. Gradient routes to the first argmax.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::MaxAxis {
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let value = softmax_forward(self.value(a), axis);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Concatenates along `axis`; all other extents must match exactly.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// `out[..., x] = in[..., x - offset]` where in range, zero elsewhere.
    pub fn shift_horizontal(&mut self, a: Var, offset: isize) -> Var {
        let value = shift_last_axis(self.value(a), offset, 0.0);
        let rg = self.rg(a);
        self.push(value, Op::Shift(a, offset), rg)
    }

    /// 2x2 average pooling over the last two axes.
    pub fn down2(&mut self, a: Var) -> Result<Var> {
        let value = down2_forward(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Down2(a), rg))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn up2(&mut self, a: Var) -> Result<Var> {
        let value = up2_forward(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Up2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Builds `[N, 2C, D, H, W]` from target and reference `[N, C, H, W]`:
    /// channels `0..C` repeat the target at every level, channels `C..2C`
    /// hold the reference shifted by `sign * d` with zero fill.
    pub fn cost_volume(&mut self, target: Var, reference: Var, levels: usize, direction: ShiftDirection) -> Result<Var> {
        let ts = self.shape(target).to_vec();
        let rs = self.shape(reference).to_vec();
        if ts != rs || ts.len() != 4 {
            return Err(Error::shape("cost_volume", format!("target {ts:?} vs reference {rs:?}")));
        }
        if levels == 0 {
            return Err(Error::invalid("cost volume needs at least one disparity level"));
        }
        let [n, c, h, w] = [ts[0], ts[1], ts[2], ts[3]];
        let sign = direction.sign();
        let t = self.value(target).data();
        let r = self.value(reference).data();
        let plane = h * w;
        let mut out = vec![0.0f32; n * 2 * c * levels * plane];
        for b in 0..n {
            for ch in 0..c {
                let src_t = &t[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let src_r = &r[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for d in 0..levels {
                    let base_t = ((b * 2 * c + ch) * levels + d) * plane;
                    out[base_t..base_t + plane].copy_from_slice(src_t);
                    let base_r = ((b * 2 * c + c + ch) * levels + d) * plane;
                    let off = sign * d as isize;
                    for y in 0..h {
                        let dst = &mut out[base_r + y * w..base_r + (y + 1) * w];
                        let row = &src_r[y * w..(y + 1) * w];
                        shift_row(row, dst, off, 0.0);
                    }
                }
            }
        }
        let rg = self.rg(target) || self.rg(reference);
        Ok(self.push(
            Tensor::new(vec![n, 2 * c, levels, h, w], out)?,
            Op::CostVolume {
                target,
                reference,
                levels,
                sign,
            },
            rg,
        ))
    }

    /// `W / (u^T W v)` with `u`, `v` held constant, `W` viewed as
    /// `[rows, rest]`.
    pub fn spectral_norm(&mut self, weight: Var, u: &[f32], v: &[f32]) -> Result<Var> {
        let w = self.value(weight);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::shape(
                "spectral_norm",
                format!("u {} / v {} for a {rows}x{cols} matrix", u.len(), v.len()),
            ));
        }
        let sigma = bilinear(w.data(), u, v, cols).max(1e-12);
        let value = w.map(|x| x / sigma);
        let rg = self.rg(weight);
        Ok(self.push(
            value,
            Op::SpectralNorm {
                weight,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let need = [self.rg(*input), self.rg(*weight), self.rg(*bias)];
                let g = conv::conv_backward(gout.data(), self.value(*weight).data(), geom, cols, need);
                if let Some(dx) = g.input {
                    self.accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), dx)?);
                }
                if let Some(dw) = g.weight {
                    self.accumulate(grads, *weight, Tensor::new(self.shape(*weight).to_vec(), dw)?);
                }
                if let Some(db) = g.bias {
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = gout.zip_map(self.value(*b), |g, x| g * x)?;
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = gout.zip_map(self.value(*a), |g, x| g * x)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let g = gout.reshape(self.shape(*a))?;
                self.accumulate(grads, *a, g);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, gout.clone());
                if self.rg(*bias) {
                    let (outer, ch, inner) = split_axis(gout.shape(), 1);
                    let mut db = vec![0.0f32; ch];
                    for o in 0..outer {
                        for (c, slot) in db.iter_mut().enumerate() {
                            *slot += gout.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                                .iter()
                                .sum::<f32>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![ch], db)?);
                }
            }
            Op::Sigmoid(a) => {
                let g = gout.zip_map(y, |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, *a, g);
            }
            Op::Elu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * x.exp() })?;
                self.accumulate(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let g = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * s })?;
                self.accumulate(grads, *a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = gout.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 })?;
                self.accumulate(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::Log(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| g / x)?;
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                let g = gout.zip_map(y, |g, e| g * e)?;
                self.accumulate(grads, *a, g);
            }
            Op::Custom(a, d) => {
                let x = self.value(*a);
                let data = gout
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&g, (&xv, &yv))| g * d(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::SumAll(a) => {
                let g = gout.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f32;
                let g = gout.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    let src = &gout.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        out[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, out)?);
            }
            Op::MaxAxis { input, axis, argmax } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = argmax[o * inner + i];
                        out[(o * len + l) * inner + i] = gout.data()[o * inner + i];
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, out)?);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut out = vec![0.0f32; y.len()];
                let (yd, gd) = (y.data(), gout.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0f32;
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            dot += yd[k] * gd[k];
                        }
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            out[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            g.extend_from_slice(
                                &gout.data()[(o * total + start) * inner..(o * total + start + len) * inner],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), g)?);
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0f32; outer * full * inner];
                for o in 0..outer {
                    g[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&gout.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(shape, g)?);
            }
            Op::Shift(a, offset) => {
                self.accumulate(grads, *a, shift_last_axis(gout, -offset, 0.0));
            }
            Op::Down2(a) => {
                let g = up2_forward(gout)?.map(|v| v * 0.25);
                self.accumulate(grads, *a, g);
            }
            Op::Up2(a) => {
                let g = down2_forward(gout)?.map(|v| v * 4.0);
                self.accumulate(grads, *a, g);
            }
            Op::CostVolume {
                target,
                reference,
                levels,
                sign,
            } => {
                let s = self.shape(*target).to_vec();
                let [n, c, h, w] = [s[0], s[1], s[2], s[3]];
                let plane = h * w;
                let gd = gout.data();
                let mut dt = vec![0.0f32; n * c * plane];
                let mut dr = vec![0.0f32; n * c * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let tdst = &mut dt[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        let rdst = &mut dr[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        for d in 0..*levels {
                            let base_t = ((b * 2 * c + ch) * levels + d) * plane;
                            for (acc, g) in tdst.iter_mut().zip(&gd[base_t..base_t + plane]) {
                                *acc += g;
                            }
                            let base_r = ((b * 2 * c + c + ch) * levels + d) * plane;
                            let off = sign * d as isize;
                            for yy in 0..h {
                                let grow = &gd[base_r + yy * w..base_r + (yy + 1) * w];
                                let rrow = &mut rdst[yy * w..(yy + 1) * w];
                                for (x, gv) in grow.iter().enumerate() {
                                    let src = x as isize - off;
                                    if src >= 0 && (src as usize) < w {
                                        rrow[src as usize] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *target, Tensor::new(s.clone(), dt)?);
                self.accumulate(grads, *reference, Tensor::new(s, dr)?);
            }
            Op::SpectralNorm { weight, u, v, sigma } => {
                let w = self.value(*weight);
                let cols = v.len();
                let inner: f64 = gout
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(&g, &x)| g as f64 * x as f64)
                    .sum();
                let k = (inner / (*sigma as f64 * *sigma as f64)) as f32;
                let mut g = gout.map(|x| x / sigma);
                for (r, &ur) in u.iter().enumerate() {
                    for (cidx, &vc) in v.iter().enumerate() {
                        g.data_mut()[r * cols + cidx] -= k * ur * vc;
                    }
                }
                self.accumulate(grads, *weight, g);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bilinear(w: &[f32], u: &[f32], v: &[f32], cols: usize) -> f32 {
    let mut s = 0.0f64;
    for (r, &ur) in u.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let rv: f64 = row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
        s += ur as f64 * rv;
    }
    s as f32
}

fn shift_row(src: &[f32], dst: &mut [f32], offset: isize, fill: f32) {
    let w = src.len() as isize;
    for (x, d) in dst.iter_mut().enumerate() {
        let s = x as isize - offset;
        *d = if s >= 0 && s < w { src[s as usize] } else { fill };
    }
}

/// Horizontal shift along the last axis: `out[..., x] = in[..., x - offset]`.
pub fn shift_last_axis(t: &Tensor, offset: isize, fill: f32) -> Tensor {
    let w = *t.shape().last().unwrap();
    let mut out = vec![fill; t.len()];
    for (src, dst) in t.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        shift_row(src, dst, offset, fill);
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_forward(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0f32; t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut m = f32::NEG_INFINITY;
            for l in 0..len {
                m = m.max(x[(o * len + l) * inner + i]);
            }
            let mut s = 0.0f32;
            for l in 0..len {
                let k = (o * len + l) * inner + i;
                let e = (x[k] - m).exp();
                out[k] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for l in 0..len {
                out[(o * len + l) * inner + i] *= inv;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

pub fn down2_forward(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape("down2", format!("need at least rank 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("down2", format!("spatial dims must be even, got {h}x{w}")));
    }
    let planes = t.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x];
                let b = src[2 * y * w + 2 * x + 1];
                let c = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = (a + b + c + d) * 0.25;
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

pub fn up2_forward(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape("up2", format!("need at least rank 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.len() / (h * w);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`
    /// over the compared coordinates.
    pub max_error: f32,
    pub compared: usize,
    /// Coordinates whose `+eps` and `-eps` evaluations fall on different
    /// pieces of a piecewise op, where a central difference is meaningless.
    pub skipped: usize,
}

impl Graph {
    /// Fingerprint of the branch taken by every piecewise op: the input sign
    /// of ELU, leaky ReLU and abs, the region of clamp, and the argmax of
    /// max reductions. Equal fingerprints mean the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Elu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => {
                    i.hash(&mut h);
                    for &v in self.value(*a).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    i.hash(&mut h);
                    for &v in self.value(*a).data() {
                        ((v < *lo) as u8 + 2 * (v > *hi) as u8).hash(&mut h);
                    }
                }
                Op::MaxAxis { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

impl GradCheckReport {
    /// Worst error and summed counts of two reports.
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_error: self.max_error.max(other.max_error),
            compared: self.compared + other.compared,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Central finite-difference check of the scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", g.shape(y)),
        ));
    }
    let grads = g.backward(y)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    drop(g);

    let eval = |t: Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        Ok((g.value(y).data()[0] as f64, g.branch_fingerprint()))
    };
    let mut report = GradCheckReport {
        max_error: 0.0,
        compared: 0,
        skipped: 0,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, kp) = eval(plus)?;
        let (fm, km) = eval(minus)?;
        if kp != km {
            report.skipped += 1;
            continue;
        }
        let numeric = ((fp - fm) / (2.0 * eps as f64)) as f32;
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f32.max(a.abs()).max(numeric.abs());
        report.compared += 1;
        report.max_error = if err.is_finite() { report.max_error.max(err) } else { f32::INFINITY };
    }
    Ok(report)
}
