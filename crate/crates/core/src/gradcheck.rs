//! Finite-difference verification of every differentiable operation.
//!
//! Each registered case builds small random inputs from a seed, reduces the
//! op output to a scalar with fixed random coefficients, and compares the
//! tape gradient of every input against central differences. Inputs are
//! kept away from the kinks of piecewise operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::splitmix64;
use crate::error::Result;
use crate::gaa::{self, AggregationMode, GaaConfig};
use crate::graph::{grad_check, GradCheckReport, Graph, ShiftDirection, Var};
use crate::icg::icg_run;
use crate::layers::{Activation, ConvLayer, GatedConvLayer};
use crate::losses::{adv_disc_value, adv_gen_loss, rec_loss};
use crate::mask::BinaryMask;
use crate::network::{fuse_branches, Discriminator, Generator, NetConfig, SnVectors};
use crate::tensor::{ConvSpec, Tensor};

pub const EPS: f32 = 1e-2;
pub const TOLERANCE: f32 = 1e-3;
pub const END_TO_END_TOLERANCE: f32 = 3e-3;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const COMPOSITE_MAX_SKIPPED: f32 = 0.2;

pub type CaseFn = fn(u64) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub group: &'static str,
    pub tolerance: f32,
    /// Share of coordinates that may straddle a kink; zero for primitive ops,
    /// whose inputs are generated away from kinks.
    pub max_skipped: f32,
    pub run: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub group: &'static str,
    pub tolerance: f32,
    pub max_skipped: f32,
    /// Worst relative error over all seeds, inputs and compared coordinates.
    pub max_error: f32,
    pub compared: usize,
    pub skipped: usize,
}

impl CaseResult {
    pub fn skipped_fraction(&self) -> f32 {
        self.skipped as f32 / (self.compared + self.skipped).max(1) as f32
    }

    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_error < self.tolerance && self.skipped_fraction() <= self.max_skipped
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Magnitudes in `[0.1, 1]` with random sign.
fn nonzero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1f32..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values spaced 0.05 apart, shuffled.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), r);
    Tensor::new(shape.to_vec(), v).expect("matching length")
}

/// `sum(c * y)` with coefficients fixed by `seed`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed, 0xc0ef);
    let c = uniform(&mut r, g.shape(y), -1.0, 1.0);
    let c = g.input(c);
    let p = g.mul(y, c)?;
    Ok(g.sum_all(p))
}

/// Checks the gradient of `probe(f(inputs))` with respect to each input.
fn check_inputs<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst = GradCheckReport::default();
    for i in 0..inputs.len() {
        let err = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.input(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                probe(g, y, seed)
            },
            &inputs[i],
            EPS,
        )?;
        worst = worst.merge(err);
    }
    Ok(worst)
}

/// Checks a scalar function of the generator with respect to every weight.
fn check_generator<F>(gen: &Generator, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Generator<Var>) -> Result<Var>,
{
    let mut worst = GradCheckReport::default();
    for (name, t) in gen.params() {
        let err = grad_check(
            |g, x| {
                let bound = gen.map(&mut |n, t| if n == name { x } else { g.input(t.clone()) });
                f(g, &bound)
            },
            t,
            EPS,
        )?;
        worst = worst.merge(err);
    }
    Ok(worst)
}

fn unary(seed: u64, op: impl Fn(&mut Graph, Var) -> Var, x: impl Fn(&mut ChaCha8Rng) -> Tensor) -> Result<GradCheckReport> {
    let mut r = rng(seed, 1);
    let t = x(&mut r);
    check_inputs(&[t], seed, |g, v| Ok(op(g, v[0])))
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let mut worst = GradCheckReport::default();
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let spec = ConvSpec::new2d(3, 4, 3, stride, padding);
        let inputs = [
            uniform(&mut r, &[1, 3, 6, 7], -1.0, 1.0),
            uniform(&mut r, &spec.weight_shape(), -0.5, 0.5),
            uniform(&mut r, &[4], -0.5, 0.5),
        ];
        worst = worst.merge(check_inputs(&inputs, seed, |g, v| g.conv2d(v[0], v[1], v[2], &spec))?);
    }
    Ok(worst)
}

fn conv3d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let spec = ConvSpec::new3d(2, 3, 3, 1, 1);
    let inputs = [
        uniform(&mut r, &[1, 2, 4, 5, 6], -1.0, 1.0),
        uniform(&mut r, &spec.weight_shape(), -0.5, 0.5),
        uniform(&mut r, &[3], -0.5, 0.5),
    ];
    check_inputs(&inputs, seed, |g, v| g.conv3d(v[0], v[1], v[2], &spec))
}

fn binary(seed: u64, op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed, 4);
    let inputs = [uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 3, 4], -1.0, 1.0)];
    check_inputs(&inputs, seed, |g, v| op(g, v[0], v[1]))
}

fn add_bias(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 5);
    let inputs = [uniform(&mut r, &[1, 3, 4, 5], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
    check_inputs(&inputs, seed, |g, v| g.add_bias(v[0], v[1]))
}

fn reduce(seed: u64, op: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed, 6);
    let inputs = [uniform(&mut r, &[2, 3, 4, 5], -1.0, 1.0)];
    check_inputs(&inputs, seed, |g, v| op(g, v[0]))
}

fn max_axis(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 7);
    let inputs = [distinct(&mut r, &[1, 2, 4, 3, 3])];
    check_inputs(&inputs, seed, |g, v| g.max_axis(v[0], 2))
}

fn concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 8);
    let inputs = [
        uniform(&mut r, &[1, 2, 3, 4], -1.0, 1.0),
        uniform(&mut r, &[1, 3, 3, 4], -1.0, 1.0),
    ];
    check_inputs(&inputs, seed, |g, v| g.concat(&[v[0], v[1]], 1))
}

fn shift(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 9);
    let inputs = [uniform(&mut r, &[1, 2, 3, 6], -1.0, 1.0)];
    check_inputs(&inputs, seed, |g, v| {
        let a = g.shift_horizontal(v[0], 2);
        let b = g.shift_horizontal(v[0], -3);
        g.add(a, b)
    })
}

fn resample(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 10);
    let inputs = [uniform(&mut r, &[1, 2, 4, 6], -1.0, 1.0)];
    let down = check_inputs(&inputs, seed, |g, v| g.down2(v[0]))?;
    let up = check_inputs(&inputs, seed, |g, v| g.up2(v[0]))?;
    Ok(down.merge(up))
}

fn cost_volume(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 11);
    let inputs = [
        uniform(&mut r, &[1, 2, 4, 6], -1.0, 1.0),
        uniform(&mut r, &[1, 2, 4, 6], -1.0, 1.0),
    ];
    let mut worst = GradCheckReport::default();
    for dir in [ShiftDirection::RefIsRight, ShiftDirection::RefIsLeft] {
        worst = worst.merge(check_inputs(&inputs, seed, |g, v| g.cost_volume(v[0], v[1], 4, dir))?);
    }
    Ok(worst)
}

fn unit(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..n).map(|_| r.gen_range(0.2f32..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn spectral_norm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 12);
    let (rows, cols) = (3, 8);
    let u = unit(&mut r, rows);
    let v = unit(&mut r, cols);
    // A dominant rank-one part keeps u^T W v well away from zero.
    let noise = uniform(&mut r, &[rows, 2, 2, 2], -0.3, 0.3);
    let w = Tensor::from_fn(&[rows, 2, 2, 2], |i| noise.data()[i] + 2.0 * u[i / cols] * v[i % cols]);
    check_inputs(&[w], seed, |g, x| g.spectral_norm(x[0], &u, &v))
}

fn custom_cube(seed: u64) -> Result<GradCheckReport> {
    unary(seed, |g, a| g.custom(a, |x| x * x * x, |x, _| 3.0 * x * x), |r| uniform(r, &[3, 4], -1.0, 1.0))
}

/// Negative control: a custom op whose backward is deliberately wrong.
pub fn corrupted_backward(seed: u64) -> Result<GradCheckReport> {
    unary(seed, |g, a| g.custom(a, |x| x * x, |x, _| 2.0 * x + 0.5), |r| uniform(r, &[3, 4], -1.0, 1.0))
}

fn conv_layer(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 13);
    let mut worst = GradCheckReport::default();
    for act in [Activation::Elu, Activation::Identity] {
        let layer = ConvLayer::init(ConvSpec::new2d(3, 4, 3, 1, 1), act, &mut r);
        let inputs = [
            uniform(&mut r, &[1, 3, 5, 6], -1.0, 1.0),
            layer.weight.clone(),
            uniform(&mut r, &[4], -0.2, 0.2),
        ];
        worst = worst.merge(check_inputs(&inputs, seed, |g, v| {
            let bound = ConvLayer {
                spec: layer.spec.clone(),
                activation: layer.activation,
                weight: v[1],
                bias: v[2],
            };
            bound.forward(g, v[0])
        })?);
    }
    Ok(worst)
}

fn gated_conv_layer(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 14);
    let layer = GatedConvLayer::init(ConvSpec::new2d(3, 4, 3, 2, 1), Activation::Elu, &mut r);
    let inputs = [
        uniform(&mut r, &[1, 3, 6, 8], -1.0, 1.0),
        layer.feature_weight.clone(),
        uniform(&mut r, &[4], -0.2, 0.2),
        layer.gate_weight.clone(),
        uniform(&mut r, &[4], -0.2, 0.2),
    ];
    check_inputs(&inputs, seed, |g, v| {
        let bound = GatedConvLayer {
            spec: layer.spec.clone(),
            activation: layer.activation,
            feature_weight: v[1],
            feature_bias: v[2],
            gate_weight: v[3],
            gate_bias: v[4],
        };
        let out = bound.forward(g, v[0])?;
        // Both outputs, so the gate path is checked on its own too.
        let a = probe(g, out.features, seed)?;
        let b = probe(g, out.soft_gate, seed ^ 1)?;
        g.add(a, b)
    })
}

fn power_vectors(disc: &mut Discriminator) -> Result<Vec<SnVectors>> {
    disc.power_step()
}

fn discriminator(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 15);
    let mut disc = Discriminator::init([3, 4, 4], &mut r);
    let sn = power_vectors(&mut disc)?;
    let image = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let by_image = check_inputs(&[image.clone()], seed, |g, v| {
        let d = disc.bind(g, &sn, false)?;
        d.forward(g, v[0])
    })?;
    let mut names = Vec::new();
    disc.visit(&mut |n, _| names.push(n.to_string()));
    let mut worst = by_image;
    for name in &names {
        let mut target = None;
        disc.visit(&mut |n, t| {
            if n == name {
                target = Some(t.clone())
            }
        });
        let target = target.expect("name from visit");
        let err = grad_check(
            |g, x| {
                let img = g.input(image.clone());
                let d = disc.bind_with(g, &sn, &mut |g, n, t| if n == name { x } else { g.input(t.clone()) })?;
                let s = d.forward(g, img)?;
                probe(g, s, seed)
            },
            &target,
            EPS,
        )?;
        worst = worst.merge(err);
    }
    Ok(worst)
}

fn feature_pair(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> [Tensor; 2] {
    [uniform(r, &[1, c, h, w], -1.0, 1.0), uniform(r, &[1, c, h, w], -1.0, 1.0)]
}

fn gaa_stack(cfg: &GaaConfig, r: &mut ChaCha8Rng) -> Vec<ConvLayer> {
    let mut stack = cfg.init_stack(r);
    for l in &mut stack {
        l.bias = uniform(r, l.bias.shape(), -0.2, 0.2);
    }
    stack
}

fn bind_stack(g: &mut Graph, stack: &[ConvLayer]) -> Vec<ConvLayer<Var>> {
    stack.iter().map(|l| l.map("", &mut |_, t| g.input(t.clone()))).collect()
}

fn build_cost_volume(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 16);
    let cfg = GaaConfig::new(3, 2);
    let inputs = feature_pair(&mut r, 2, 3, 5);
    check_inputs(&inputs, seed, |g, v| {
        Ok(gaa::build_cost_volume(g, v[0], v[1], &cfg, ShiftDirection::RefIsRight)?.values)
    })
}

fn attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 17);
    let cfg = GaaConfig::new(3, 2);
    let stack = gaa_stack(&cfg, &mut r);
    let inputs = feature_pair(&mut r, 2, 3, 4);
    check_inputs(&inputs, seed, |g, v| {
        let s = bind_stack(g, &stack);
        let vol = gaa::build_cost_volume(g, v[0], v[1], &cfg, ShiftDirection::RefIsLeft)?;
        Ok(gaa::attention_from_volume(g, &vol, &s)?.values)
    })
}

fn aggregate(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 18);
    let cfg = GaaConfig::new(3, 2);
    let stack = gaa_stack(&cfg, &mut r);
    let inputs = feature_pair(&mut r, 2, 3, 4);
    check_inputs(&inputs, seed, |g, v| {
        let s = bind_stack(g, &stack);
        let vol = gaa::build_cost_volume(g, v[0], v[1], &cfg, ShiftDirection::RefIsRight)?;
        let a = gaa::attention_from_volume(g, &vol, &s)?;
        gaa::aggregate(g, &a, &vol)
    })
}

fn merge(seed: u64, mode: AggregationMode) -> Result<GradCheckReport> {
    let mut r = rng(seed, 19);
    let cfg = GaaConfig::new(3, 2);
    let stack = gaa_stack(&cfg, &mut r);
    let inputs = feature_pair(&mut r, 2, 3, 4);
    let mut worst = check_inputs(&inputs, seed, |g, v| {
        let s = bind_stack(g, &stack);
        gaa::merge_features(g, mode, v[0], v[1], &cfg, &s, ShiftDirection::RefIsRight)
    })?;
    if mode != AggregationMode::Concat {
        for li in 0..stack.len() {
            let params = [stack[li].weight.clone(), stack[li].bias.clone()];
            let err = check_inputs(&params, seed, |g, p| {
                let mut s = bind_stack(g, &stack);
                s[li].weight = p[0];
                s[li].bias = p[1];
                let t = g.input(inputs[0].clone());
                let rf = g.input(inputs[1].clone());
                gaa::merge_features(g, mode, t, rf, &cfg, &s, ShiftDirection::RefIsRight)
            })?;
            worst = worst.merge(err);
        }
    }
    Ok(worst)
}

const SIDE: usize = 8;

fn tiny_generator(seed: u64, mode: AggregationMode) -> Result<(Generator, ChaCha8Rng)> {
    let mut r = rng(seed, 20);
    let mut cfg = NetConfig::tiny(2);
    cfg.mode = mode;
    let gen = Generator::init(&cfg, &mut r)?;
    Ok((gen, r))
}

fn image(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[1, 3, SIDE, SIDE], 0.05, 0.95)
}

fn blob_mask(r: &mut ChaCha8Rng) -> BinaryMask {
    let (y0, x0) = (r.gen_range(0..SIDE - 3), r.gen_range(0..SIDE - 3));
    BinaryMask::from_fn(SIDE, SIDE, |y, x| !(y >= y0 && y < y0 + 3 && x >= x0 && x < x0 + 3))
}

fn encoder_decoder(seed: u64) -> Result<GradCheckReport> {
    let (gen, mut r) = tiny_generator(seed, AggregationMode::Gaa)?;
    let (xt, xr) = (image(&mut r), image(&mut r));
    let (mt, mr) = (blob_mask(&mut r), blob_mask(&mut r));
    check_generator(&gen, |g, b| {
        let t = g.input(xt.clone());
        let rf = g.input(xr.clone());
        let out = b.encoder_decoder(g, t, &mt, rf, &mr, ShiftDirection::RefIsRight)?;
        let a = probe(g, out.restored, seed)?;
        let s = probe(g, out.soft_mask, seed ^ 1)?;
        g.add(a, s)
    })
}

fn fullres(seed: u64) -> Result<GradCheckReport> {
    let (gen, mut r) = tiny_generator(seed, AggregationMode::Gaa)?;
    let xt = image(&mut r);
    let mt = blob_mask(&mut r);
    check_generator(&gen, |g, b| {
        let t = g.input(xt.clone());
        let out = b.fullres(g, t, &mt)?;
        let a = probe(g, out.restored, seed)?;
        let s = probe(g, out.soft_mask, seed ^ 1)?;
        g.add(a, s)
    })
}

fn generator_input(seed: u64) -> Result<GradCheckReport> {
    let (gen, mut r) = tiny_generator(seed, AggregationMode::Max)?;
    let inputs = [image(&mut r), image(&mut r)];
    let (mt, mr) = (blob_mask(&mut r), blob_mask(&mut r));
    check_inputs(&inputs, seed, |g, v| {
        let b = gen.bind_frozen(g);
        let e = b.encoder_decoder(g, v[0], &mt, v[1], &mr, ShiftDirection::RefIsLeft)?;
        let f = b.fullres(g, v[0], &mt)?;
        fuse_branches(g, &e, &f)
    })
}

/// Cross guidance over two iterations followed by the reconstruction loss.
fn generator_end_to_end(seed: u64) -> Result<GradCheckReport> {
    let (gen, mut r) = tiny_generator(seed, AggregationMode::Gaa)?;
    let (yl, yr) = (image(&mut r), image(&mut r));
    let (ml, mr) = (blob_mask(&mut r), blob_mask(&mut r));
    let xl = Tensor::from_fn(yl.shape(), |i| yl.data()[i] * ml.tensor().data()[i % (SIDE * SIDE)]);
    let xr = Tensor::from_fn(yr.shape(), |i| yr.data()[i] * mr.tensor().data()[i % (SIDE * SIDE)]);
    check_generator(&gen, |g, b| {
        let (vl, vr) = (g.input(xl.clone()), g.input(xr.clone()));
        let (tl, tr) = (g.input(yl.clone()), g.input(yr.clone()));
        let out = icg_run(g, b, vl, vr, &ml, &mr, 2)?;
        rec_loss(g, &out.left_snapshots, &out.right_snapshots, tl, tr)
    })
}

fn rec(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 21);
    let shape = [1, 3, 4, 4];
    // Predictions stay at least 0.1 from the targets so |x - y| has no kink.
    let y = [uniform(&mut r, &shape, 0.3, 0.7), uniform(&mut r, &shape, 0.3, 0.7)];
    let offsets: Vec<Tensor> = (0..4).map(|_| nonzero(&mut r, &shape).map(|v| 0.25 * v)).collect();
    let preds: Vec<Tensor> = offsets
        .iter()
        .enumerate()
        .map(|(i, o)| Tensor::from_fn(&shape, |j| y[i % 2].data()[j] + o.data()[j]))
        .collect();
    check_inputs(&preds, seed, |g, v| {
        let (a, b) = (g.input(y[0].clone()), g.input(y[1].clone()));
        rec_loss(g, &[v[0], v[2]], &[v[1], v[3]], a, b)
    })
}

fn adv_gen(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 22);
    let mut disc = Discriminator::init([3, 4, 4], &mut r);
    let sn = power_vectors(&mut disc)?;
    let fakes: Vec<Tensor> = (0..4).map(|_| image(&mut r)).collect();
    check_inputs(&fakes, seed, |g, v| {
        let d = disc.bind(g, &sn, false)?;
        adv_gen_loss(g, &d, &[v[0], v[2]], &[v[1], v[3]])
    })
}

fn adv_disc(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 23);
    let mut disc = Discriminator::init([3, 4, 4], &mut r);
    let sn = power_vectors(&mut disc)?;
    let images: Vec<Tensor> = (0..6).map(|_| image(&mut r)).collect();
    let mut names = Vec::new();
    disc.visit(&mut |n, t| names.push((n.to_string(), t.clone())));
    let mut worst = GradCheckReport::default();
    for (name, target) in &names {
        let err = grad_check(
            |g, x| {
                let d = disc.bind_with(g, &sn, &mut |g, n, t| if n == name { x } else { g.input(t.clone()) })?;
                let v: Vec<Var> = images.iter().map(|t| g.input(t.clone())).collect();
                adv_disc_value(g, &d, &[v[0], v[2]], &[v[1], v[3]], v[4], v[5])
            },
            target,
            EPS,
        )?;
        worst = worst.merge(err);
    }
    Ok(worst)
}

macro_rules! case {
    ($group:expr, $name:expr, $f:expr) => {
        GradCase {
            name: $name,
            group: $group,
            tolerance: TOLERANCE,
            max_skipped: if $group == "tensor" { 0.0 } else { COMPOSITE_MAX_SKIPPED },
            run: $f,
        }
    };
}

/// Every differentiable operation, grouped by module.
pub fn registry() -> Vec<GradCase> {
    let mut cases = vec![
        case!("tensor", "conv2d", conv2d),
        case!("tensor", "conv3d", conv3d),
        case!("tensor", "add", |s| binary(s, |g, a, b| g.add(a, b))),
        case!("tensor", "sub", |s| binary(s, |g, a, b| g.sub(a, b))),
        case!("tensor", "mul", |s| binary(s, |g, a, b| g.mul(a, b))),
        case!("tensor", "scale", |s| unary(s, |g, a| g.scale(a, -1.7), |r| uniform(r, &[3, 4], -1.0, 1.0))),
        case!("tensor", "add_scalar", |s| unary(s, |g, a| g.add_scalar(a, 0.3), |r| uniform(r, &[3, 4], -1.0, 1.0))),
        case!("tensor", "one_minus", |s| unary(s, |g, a| g.one_minus(a), |r| uniform(r, &[3, 4], -1.0, 1.0))),
        case!("tensor", "add_bias", add_bias),
        case!("tensor", "sigmoid", |s| unary(s, |g, a| g.sigmoid(a), |r| uniform(r, &[3, 4], -3.0, 3.0))),
        case!("tensor", "elu", |s| unary(s, |g, a| g.elu(a), nonzero_34)),
        case!("tensor", "leaky_relu", |s| unary(s, |g, a| g.leaky_relu(a, 0.2), nonzero_34)),
        case!("tensor", "clamp", |s| unary(s, |g, a| g.clamp(a, -0.5, 0.5), |r| clamp_input(r))),
        case!("tensor", "abs", |s| unary(s, |g, a| g.abs(a), nonzero_34)),
        case!("tensor", "ln", |s| unary(s, |g, a| g.ln(a), |r| uniform(r, &[3, 4], 0.5, 2.0))),
        case!("tensor", "exp", |s| unary(s, |g, a| g.exp(a), |r| uniform(r, &[3, 4], -1.0, 1.0))),
        case!("tensor", "custom", custom_cube),
        case!("tensor", "sum_all", |s| reduce(s, |g, a| Ok(g.sum_all(a)))),
        case!("tensor", "mean_all", |s| reduce(s, |g, a| Ok(g.mean_all(a)))),
        case!("tensor", "sum_axis", |s| reduce(s, |g, a| g.sum_axis(a, 2))),
        case!("tensor", "max_axis", max_axis),
        case!("tensor", "softmax", |s| reduce(s, |g, a| g.softmax(a, 1))),
        case!("tensor", "concat", concat),
        case!("tensor", "slice", |s| reduce(s, |g, a| g.slice(a, 1, 1, 2))),
        case!("tensor", "shift_horizontal", shift),
        case!("tensor", "down2_up2", resample),
        case!("tensor", "reshape", |s| reduce(s, |g, a| g.reshape(a, &[6, 20]))),
        case!("tensor", "cost_volume", cost_volume),
        case!("tensor", "spectral_norm", spectral_norm),
        case!("layers", "conv_layer", conv_layer),
        case!("layers", "gated_conv_layer", gated_conv_layer),
        case!("layers", "discriminator", discriminator),
        case!("gaa", "build_cost_volume", build_cost_volume),
        case!("gaa", "attention_from_volume", attention),
        case!("gaa", "aggregate", aggregate),
        case!("gaa", "merge_gaa", |s| merge(s, AggregationMode::Gaa)),
        case!("gaa", "merge_max", |s| merge(s, AggregationMode::Max)),
        case!("gaa", "merge_concat", |s| merge(s, AggregationMode::Concat)),
        case!("network", "encoder_decoder", encoder_decoder),
        case!("network", "fullres", fullres),
        case!("network", "generator_inputs", generator_input),
        case!("losses", "rec_loss", rec),
        case!("losses", "adv_gen_loss", adv_gen),
        case!("losses", "adv_disc_value", adv_disc),
    ];
    cases.push(GradCase {
        name: "generator_end_to_end",
        group: "network",
        tolerance: END_TO_END_TOLERANCE,
        max_skipped: COMPOSITE_MAX_SKIPPED,
        run: generator_end_to_end,
    });
    cases
}

fn nonzero_34(r: &mut ChaCha8Rng) -> Tensor {
    nonzero(r, &[3, 4])
}

/// Values at least 0.1 from both clamp bounds.
fn clamp_input(r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[3, 4], |_| {
        let v = r.gen_range(0.0f32..1.0);
        match r.gen_range(0..3) {
            0 => -1.0 + 0.4 * v,
            1 => -0.4 + 0.8 * v,
            _ => 0.6 + 0.4 * v,
        }
    })
}

/// Runs one case over `seeds`.
pub fn run_case(case: &GradCase, seeds: &[u64]) -> Result<CaseResult> {
    let mut total = GradCheckReport::default();
    for &s in seeds {
        let r = (case.run)(s)?;
        let r = GradCheckReport {
            max_error: if r.max_error.is_nan() { f32::INFINITY } else { r.max_error },
            ..r
        };
        total = total.merge(r);
    }
    Ok(CaseResult {
        name: case.name,
        group: case.group,
        tolerance: case.tolerance,
        max_skipped: case.max_skipped,
        max_error: total.max_error,
        compared: total.compared,
        skipped: total.skipped,
    })
}

/// The whole registry over [`SEEDS`], in registry order.
pub fn run_all() -> Result<Vec<CaseResult>> {
    registry().par_iter().map(|c| run_case(c, &SEEDS)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_is_caught() {
        let bad = GradCase {
            name: "corrupted",
            group: "fixture",
            tolerance: TOLERANCE,
            max_skipped: 0.0,
            run: corrupted_backward,
        };
        assert!(!run_case(&bad, &[0]).unwrap().passed());
    }

    #[test]
    fn names_are_unique() {
        let r = registry();
        let mut names: Vec<_> = r.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), r.len());
    }
}
