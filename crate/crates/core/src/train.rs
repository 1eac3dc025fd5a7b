//! Training loop, inference and evaluation helpers.
//!
//! One optimizer step per batch: a power-iteration update of the
//! discriminator, then per sample a generator graph (cross guidance,
//! reconstruction plus weighted adversarial loss, discriminator frozen) and
//! a discriminator graph on the detached fakes. Per-sample gradients are
//! computed in parallel and summed in sample order, so results do not depend
//! on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{MaskBucket, StereoSample};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::icg::{icg_run, IcgOutput, IterationRecord, View};
use crate::losses::{adv_disc_value, adv_gen_loss, rec_loss, LossReport};
use crate::mask::BinaryMask;
use crate::metrics;
use crate::network::{batched, unbatched, Discriminator, Generator, ModelParams, SnVectors};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub disc_learning_rate: f32,
    pub momentum: f32,
    /// Global gradient-norm cap per network; 0 disables clipping.
    pub clip_norm: f32,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.1,
            disc_learning_rate: 0.1,
            momentum: 0.9,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.disc_learning_rate >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0,1)", self.momentum)));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossReport,
}

/// Per-parameter gradients keyed like the parameters themselves.
pub struct ParamGrads {
    pub generator: Generator<Tensor>,
    pub discriminator: Vec<[Tensor; 2]>,
}

fn zeros_like_generator(g: &Generator) -> Generator<Tensor> {
    g.map(&mut |_, t| Tensor::zeros(t.shape()))
}

fn zeros_like_disc(d: &Discriminator) -> Vec<[Tensor; 2]> {
    d.layers
        .iter()
        .map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
        .collect()
}

fn grad_or_zero(grads: &Gradients, v: Var, shape: &[usize]) -> Tensor {
    grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
}

/// Runs cross guidance on one sample inside `g`.
pub fn forward_sample(
    g: &mut Graph,
    generator: &Generator<Var>,
    sample: &StereoSample,
    iterations: usize,
) -> Result<IcgOutput> {
    let xl = g.input(batched(&sample.x_left)?);
    let xr = g.input(batched(&sample.x_right)?);
    icg_run(g, generator, xl, xr, &sample.m_left, &sample.m_right, iterations)
}

/// Losses and gradients of one sample under the current parameters.
pub fn sample_gradients(params: &ModelParams, sn: &[SnVectors], sample: &StereoSample) -> Result<(ParamGrads, LossReport)> {
    let lambda = params.lambda_adv;
    let mut g = Graph::new();
    let gen = params.generator.bind(&mut g);
    let out = forward_sample(&mut g, &gen, sample, params.iterations)?;
    let yl = g.input(batched(&sample.y_left)?);
    let yr = g.input(batched(&sample.y_right)?);
    let rec = rec_loss(&mut g, &out.left_snapshots, &out.right_snapshots, yl, yr)?;
    let disc_frozen = params.discriminator.bind(&mut g, sn, false)?;
    let adv_gen = adv_gen_loss(&mut g, &disc_frozen, &out.left_snapshots, &out.right_snapshots)?;
    let weighted = g.scale(adv_gen, lambda);
    let total = g.add(rec, weighted)?;
    check_finite(g.value(total), "generator loss")?;
    let grads = g.backward(total)?;
    let generator_grads = gen.map(&mut |_, &v| grad_or_zero(&grads, v, g.shape(v)));
    let rec_v = g.value(rec).data()[0];
    let gen_v = g.value(adv_gen).data()[0];

    // Discriminator phase on detached fakes.
    let mut gd = Graph::new();
    let fakes_l: Vec<Var> = out.left_snapshots.iter().map(|&v| gd.input(g.value(v).clone())).collect();
    let fakes_r: Vec<Var> = out.right_snapshots.iter().map(|&v| gd.input(g.value(v).clone())).collect();
    let yl = gd.input(batched(&sample.y_left)?);
    let yr = gd.input(batched(&sample.y_right)?);
    let disc = params.discriminator.bind(&mut gd, sn, true)?;
    let value = adv_disc_value(&mut gd, &disc, &fakes_l, &fakes_r, yl, yr)?;
    check_finite(gd.value(value), "discriminator objective")?;
    let neg = gd.scale(value, -1.0);
    let dgrads = gd.backward(neg)?;
    let disc_grads = params
        .discriminator
        .layers
        .iter()
        .zip(disc.weights.iter().zip(&disc.biases))
        .map(|(l, (&w, &b))| {
            [
                grad_or_zero(&dgrads, w, l.weight.shape()),
                grad_or_zero(&dgrads, b, l.bias.shape()),
            ]
        })
        .collect();
    let disc_v = gd.value(value).data()[0];
    Ok((
        ParamGrads {
            generator: generator_grads,
            discriminator: disc_grads,
        },
        LossReport::new(rec_v, gen_v, disc_v, lambda),
    ))
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// SGD with momentum over both networks.
pub struct Optimizer {
    gen_velocity: Generator<Tensor>,
    disc_velocity: Vec<[Tensor; 2]>,
}

fn global_norm(tensors: &[&Tensor]) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn clip_factor(norm: f64, clip: f32) -> f32 {
    if clip > 0.0 && norm > clip as f64 {
        (clip as f64 / norm) as f32
    } else {
        1.0
    }
}

fn sgd_update(param: &mut Tensor, vel: &mut Tensor, grad: &Tensor, lr: f32, momentum: f32, scale: f32) {
    for ((p, v), &gr) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
        *v = momentum * *v + gr * scale;
        *p -= lr * *v;
    }
}

impl Optimizer {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            gen_velocity: zeros_like_generator(&params.generator),
            disc_velocity: zeros_like_disc(&params.discriminator),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, cfg: &TrainConfig) -> Result<()> {
        let gen_grads = grads.generator.params();
        if let Some((name, _)) = gen_grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let refs: Vec<&Tensor> = gen_grads.iter().map(|(_, t)| *t).collect();
        let gscale = clip_factor(global_norm(&refs), cfg.clip_norm);
        let slots = params.generator.params_mut().into_iter().zip(self.gen_velocity.params_mut());
        for (((name, p), (_, vel)), grad) in slots.zip(refs) {
            sgd_update(p, vel, grad, cfg.learning_rate, cfg.momentum, gscale);
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }

        let drefs: Vec<&Tensor> = grads.discriminator.iter().flat_map(|[w, b]| [w, b]).collect();
        if let Some(k) = drefs.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of disc.{}.{}", k / 2, ["weight", "bias"][k % 2])));
        }
        let dscale = clip_factor(global_norm(&drefs), cfg.clip_norm);
        for (k, (layer, vel)) in params
            .discriminator
            .layers
            .iter_mut()
            .zip(self.disc_velocity.iter_mut())
            .enumerate()
        {
            let [gw, gb] = &grads.discriminator[k];
            sgd_update(&mut layer.weight, &mut vel[0], gw, cfg.disc_learning_rate, cfg.momentum, dscale);
            sgd_update(&mut layer.bias, &mut vel[1], gb, cfg.disc_learning_rate, cfg.momentum, dscale);
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::NonFinite(format!("parameter disc.{k}")));
            }
        }
        Ok(())
    }
}

fn add_scaled(acc: &mut Tensor, g: &Tensor, scale: f32) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += scale * b;
    }
}

fn accumulate(acc: &mut ParamGrads, g: &ParamGrads, scale: f32) {
    for ((_, a), (_, b)) in acc.generator.params_mut().into_iter().zip(g.generator.params()) {
        add_scaled(a, b, scale);
    }
    for (a, b) in acc.discriminator.iter_mut().zip(&g.discriminator) {
        for k in 0..2 {
            add_scaled(&mut a[k], &b[k], scale);
        }
    }
}

/// One optimizer step on `batch`; returns the batch-mean losses.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &[&StereoSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let sn = params.discriminator.power_step()?;
    let shared: &ModelParams = params;
    let results: Vec<Result<(ParamGrads, LossReport)>> = batch
        .par_iter()
        .map(|s| sample_gradients(shared, &sn, s))
        .collect();
    let mut acc = ParamGrads {
        generator: zeros_like_generator(&params.generator),
        discriminator: zeros_like_disc(&params.discriminator),
    };
    let scale = 1.0 / batch.len() as f32;
    let mut sums = [0.0f64; 3];
    for r in results {
        let (g, l) = r?;
        accumulate(&mut acc, &g, scale);
        sums[0] += l.rec as f64;
        sums[1] += l.adv_gen as f64;
        sums[2] += l.adv_disc as f64;
    }
    opt.step(params, &acc, cfg)?;
    let n = batch.len() as f64;
    Ok(LossReport::new(
        (sums[0] / n) as f32,
        (sums[1] / n) as f32,
        (sums[2] / n) as f32,
        params.lambda_adv,
    ))
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    params: &mut ModelParams,
    samples: &[StereoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut opt = Optimizer::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&StereoSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let l = train_step(params, &mut opt, &batch, cfg)?;
            sums[0] += l.rec as f64;
            sums[1] += l.adv_gen as f64;
            sums[2] += l.adv_disc as f64;
            batches += 1;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            losses: LossReport::new(
                (sums[0] / n) as f32,
                (sums[1] / n) as f32,
                (sums[2] / n) as f32,
                params.lambda_adv,
            ),
        };
        log::info!(
            "epoch {epoch}: rec {:.5} adv_gen {:.5} adv_disc {:.5} total {:.5}",
            stats.losses.rec,
            stats.losses.adv_gen,
            stats.losses.adv_disc,
            stats.losses.total
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Images produced at one iteration, `[3,H,W]`.
#[derive(Debug, Clone)]
pub struct IterationImage {
    pub t: usize,
    pub view: View,
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub left: Tensor,
    pub right: Tensor,
    pub left_mask: BinaryMask,
    pub right_mask: BinaryMask,
    pub history: Vec<IterationImage>,
}

/// Runs cross guidance without gradients. Images are `[3,H,W]` and are
/// zeroed in their holes before use.
pub fn infer(
    params: &ModelParams,
    x_left: &Tensor,
    x_right: &Tensor,
    m_left: &BinaryMask,
    m_right: &BinaryMask,
    iterations: usize,
) -> Result<Inference> {
    let xl = crate::data::apply_mask(x_left, m_left)?;
    let xr = crate::data::apply_mask(x_right, m_right)?;
    let mut g = Graph::new();
    let gen = params.generator.bind_frozen(&mut g);
    let vl = g.input(batched(&xl)?);
    let vr = g.input(batched(&xr)?);
    let out = icg_run(&mut g, &gen, vl, vr, m_left, m_right, iterations)?;
    let history = out
        .history
        .iter()
        .map(|r: &IterationRecord| {
            Ok(IterationImage {
                t: r.t,
                view: r.view,
                image: unbatched(g.value(r.output))?,
                mask: r.mask_after.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Inference {
        left: unbatched(g.value(out.left))?,
        right: unbatched(g.value(out.right))?,
        left_mask: out.left_mask,
        right_mask: out.right_mask,
        history,
    })
}

/// Mean absolute error over the missing pixels of `mask` (all channels).
/// Returns 0 when nothing is missing.
pub fn masked_l1(pred: &Tensor, truth: &Tensor, mask: &BinaryMask) -> Result<f64> {
    pred.expect_same_shape("masked_l1", truth)?;
    let s = pred.shape();
    if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(Error::shape("masked_l1", format!("image {s:?} vs mask {:?}", mask.tensor().shape())));
    }
    let plane = s[1] * s[2];
    let m = mask.tensor().data();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for c in 0..s[0] {
        for i in 0..plane {
            if m[i] == 0.0 {
                sum += (pred.data()[c * plane + i] as f64 - truth.data()[c * plane + i] as f64).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Per-sample quality of one restored pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub psnr_left: f64,
    pub psnr_right: f64,
    pub ssim_left: f64,
    pub ssim_right: f64,
    pub masked_l1: f64,
}

pub fn score_pair(left: &Tensor, right: &Tensor, s: &StereoSample) -> Result<PairScores> {
    let l1 = (masked_l1(left, &s.y_left, &s.m_left)? + masked_l1(right, &s.y_right, &s.m_right)?) / 2.0;
    Ok(PairScores {
        psnr_left: metrics::psnr(left, &s.y_left)?,
        psnr_right: metrics::psnr(right, &s.y_right)?,
        ssim_left: metrics::ssim(left, &s.y_left)?,
        ssim_right: metrics::ssim(right, &s.y_right)?,
        masked_l1: l1,
    })
}

/// Means over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub bucket: MaskBucket,
    pub count: usize,
    pub psnr_left: f64,
    pub psnr_right: f64,
    pub ssim_left: f64,
    pub ssim_right: f64,
    pub masked_l1: f64,
}

impl EvalSummary {
    pub fn psnr(&self) -> f64 {
        (self.psnr_left + self.psnr_right) / 2.0
    }

    pub fn ssim(&self) -> f64 {
        (self.ssim_left + self.ssim_right) / 2.0
    }

    fn from_scores(bucket: MaskBucket, scores: &[PairScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty dataset"));
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&PairScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            bucket,
            count: scores.len(),
            psnr_left: mean(|s| s.psnr_left),
            psnr_right: mean(|s| s.psnr_right),
            ssim_left: mean(|s| s.ssim_left),
            ssim_right: mean(|s| s.ssim_right),
            masked_l1: mean(|s| s.masked_l1),
        })
    }
}

/// Restores every sample and averages the scores.
pub fn evaluate(params: &ModelParams, samples: &[StereoSample], bucket: MaskBucket, iterations: usize) -> Result<EvalSummary> {
    let scores = samples
        .par_iter()
        .map(|s| {
            let r = infer(params, &s.x_left, &s.x_right, &s.m_left, &s.m_right, iterations)?;
            score_pair(&r.left, &r.right, s)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalSummary::from_scores(bucket, &scores)
}

/// Scores of the masked inputs themselves (holes left at zero).
pub fn evaluate_zero_fill(samples: &[StereoSample], bucket: MaskBucket) -> Result<EvalSummary> {
    let scores = samples
        .iter()
        .map(|s| score_pair(&s.x_left, &s.x_right, s))
        .collect::<Result<Vec<_>>>()?;
    EvalSummary::from_scores(bucket, &scores)
}
