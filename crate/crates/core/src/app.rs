//! The command implementations behind the CLI. Each writes its report to
//! `out` and its artifacts to disk.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, mask_ratio, sample_masks, Manifest, MaskBucket, StereoSample};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::network::ModelParams;
use crate::pnm;
use crate::train::{self, evaluate, evaluate_zero_fill, EvalSummary};

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<output>", e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ratio_summary(samples: &[StereoSample]) -> (f64, f64, f64) {
    let ratios: Vec<f64> = samples
        .iter()
        .flat_map(|s| [mask_ratio(&s.m_left), mask_ratio(&s.m_right)])
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

fn generate(cfg: &RunConfig, first: usize, count: usize) -> Result<Vec<StereoSample>> {
    (first..first + count)
        .into_par_iter()
        .map(|i| data::make_sample(cfg.seed, i as u64, cfg.height, cfg.width, cfg.max_disp, cfg.bucket))
        .collect()
}

/// Writes `train/` and `test/` under the dataset directory. Test samples
/// continue the seeded stream after the training samples.
pub fn cmd_gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    data::check_geometry(cfg.height, cfg.width, cfg.max_disp)?;
    for (name, dir, first, count) in [
        ("train", cfg.train_dir(), 0, cfg.train_count),
        ("test", cfg.test_dir(), cfg.train_count, cfg.test_count),
    ] {
        let samples = generate(cfg, first, count)?;
        let manifest = Manifest {
            count,
            height: cfg.height,
            width: cfg.width,
            max_disp: cfg.max_disp,
            seed: cfg.seed,
            first_index: first,
            bucket: cfg.bucket,
        };
        data::write_dataset(&dir, &manifest, &samples)?;
        let (mean, lo, hi) = ratio_summary(&samples);
        emit(
            out,
            &format!(
                "{name}: {count} samples {}x{} max_disp {} bucket {} mask ratio mean {mean:.3} min {lo:.3} max {hi:.3} -> {}\n",
                cfg.height,
                cfg.width,
                cfg.max_disp,
                cfg.bucket,
                dir.display()
            ),
        )?;
    }
    Ok(())
}

pub const LOSS_LOG: &str = "loss_log.csv";

/// Trains on `train/`, printing one line per epoch, and writes the
/// checkpoint plus a CSV loss log in the output directory.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<ModelParams> {
    cfg.validate()?;
    let (manifest, samples) = data::read_dataset(&cfg.train_dir())?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("no training samples in {}", cfg.train_dir().display())));
    }
    let mut params = ModelParams::init(cfg.net_config(), cfg.seed)?;
    params.lambda_adv = cfg.lambda_adv;
    params.iterations = cfg.iterations;
    emit(
        out,
        &format!(
            "training {} on {} samples {}x{} ({} parameters)\n",
            cfg.ablation.as_str(),
            samples.len(),
            manifest.height,
            manifest.width,
            params.param_count()
        ),
    )?;
    let mut log = String::from("epoch,rec,adv_gen,adv_disc,total\n");
    let mut sink: Result<()> = Ok(());
    train::train(&mut params, &samples, &cfg.train_config(), |s| {
        let l = s.losses;
        let line = format!(
            "epoch {} rec {:.6} adv_gen {:.6} adv_disc {:.6} total {:.6}\n",
            s.epoch, l.rec, l.adv_gen, l.adv_disc, l.total
        );
        let _ = writeln!(log, "{},{},{},{},{}", s.epoch, l.rec, l.adv_gen, l.adv_disc, l.total);
        if sink.is_ok() {
            sink = emit(out, &line);
        }
    })?;
    sink?;
    write_file(&cfg.out_dir.join(LOSS_LOG), log.as_bytes())?;
    ensure_parent(&cfg.checkpoint)?;
    checkpoint::save(&params, &cfg.checkpoint)?;
    emit(out, &format!("checkpoint written to {}\n", cfg.checkpoint.display()))?;
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub left: PathBuf,
    pub right: PathBuf,
    pub mask_left: PathBuf,
    pub mask_right: PathBuf,
    /// Defaults to the checkpoint's iteration count.
    pub iterations: Option<usize>,
    pub out_dir: PathBuf,
}

/// Restores one pair and writes `out_left.ppm`, `out_right.ppm` and one
/// `iter_t.ppm` per iteration.
pub fn cmd_infer(args: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let params = checkpoint::load(&args.checkpoint)?;
    let left = pnm::read_image(&args.left)?;
    let right = pnm::read_image(&args.right)?;
    let ml = pnm::read_mask(&args.mask_left)?;
    let mr = pnm::read_mask(&args.mask_right)?;
    if left.shape() != right.shape() {
        return Err(Error::shape(
            "infer",
            format!("left {:?} and right {:?} differ", left.shape(), right.shape()),
        ));
    }
    let (h, w) = (left.shape()[1], left.shape()[2]);
    for (name, m) in [("left", &ml), ("right", &mr)] {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape(
                "infer",
                format!("{name} mask is {}x{}, images are {h}x{w}", m.height(), m.width()),
            ));
        }
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape("infer", format!("image sides must be divisible by 4, got {h}x{w}")));
    }
    let t = args.iterations.unwrap_or(params.iterations);
    let r = train::infer(&params, &left, &right, &ml, &mr, t)?;
    ensure_dir(&args.out_dir)?;
    pnm::write_image(&r.left, args.out_dir.join("out_left.ppm"))?;
    pnm::write_image(&r.right, args.out_dir.join("out_right.ppm"))?;
    for it in &r.history {
        pnm::write_image(&it.image, args.out_dir.join(format!("iter_{}.ppm", it.t)))?;
    }
    emit(
        out,
        &format!(
            "restored {h}x{w} pair with T = {t}: missing left {} -> {}, right {} -> {}; wrote {}\n",
            ml.missing_count(),
            r.left_mask.missing_count(),
            mr.missing_count(),
            r.right_mask.missing_count(),
            args.out_dir.display()
        ),
    )
}

/// What `eval` scores against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    Model,
    /// The masked inputs with holes left at zero.
    ZeroFill,
    /// The ground truth itself.
    GroundTruth,
}

impl EvalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::Model => "model",
            EvalMethod::ZeroFill => "zero_fill",
            EvalMethod::GroundTruth => "ground_truth",
        }
    }
}

impl std::str::FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(EvalMethod::Model),
            "zero_fill" => Ok(EvalMethod::ZeroFill),
            "ground_truth" => Ok(EvalMethod::GroundTruth),
            _ => Err(Error::invalid(format!(
                "unknown eval method {s:?} (expected model, zero_fill or ground_truth)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub buckets: Vec<MaskBucket>,
    pub method: EvalMethod,
    pub iterations: Option<usize>,
    /// Where `eval.csv` goes; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub method: EvalMethod,
    pub summary: EvalSummary,
}

pub const CSV_HEADER: &str = "method,bucket,count,psnr_left,psnr_right,psnr,ssim_left,ssim_right,ssim,masked_l1";

impl EvalRow {
    pub fn csv(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            self.method.as_str(),
            s.bucket,
            s.count,
            s.psnr_left,
            s.psnr_right,
            s.psnr(),
            s.ssim_left,
            s.ssim_right,
            s.ssim(),
            s.masked_l1
        )
    }
}

/// Dataset samples with masks for `bucket`: the stored masks when the
/// bucket matches the manifest, otherwise regenerated from the seeds.
pub fn samples_for_bucket(manifest: &Manifest, samples: &[StereoSample], bucket: MaskBucket) -> Result<Vec<StereoSample>> {
    if bucket == manifest.bucket {
        return Ok(samples.to_vec());
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (ml, mr) = sample_masks(
                manifest.seed,
                (manifest.first_index + i) as u64,
                manifest.height,
                manifest.width,
                bucket,
            )?;
            s.clone().with_masks(ml, mr)
        })
        .collect()
}

fn ground_truth_summary(samples: &[StereoSample], bucket: MaskBucket) -> Result<EvalSummary> {
    let truth: Vec<StereoSample> = samples
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.x_left = s.y_left.clone();
            t.x_right = s.y_right.clone();
            t
        })
        .collect();
    evaluate_zero_fill(&truth, bucket)
}

/// Per-bucket mean PSNR and SSIM. Prints a table followed by CSV rows.
pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<Vec<EvalRow>> {
    let (manifest, samples) = data::read_dataset(&args.dataset)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", args.dataset.display())));
    }
    if args.buckets.is_empty() {
        return Err(Error::invalid("no buckets requested"));
    }
    let params = match args.method {
        EvalMethod::Model => Some(checkpoint::load(&args.checkpoint)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for &bucket in &args.buckets {
        let set = samples_for_bucket(&manifest, &samples, bucket)?;
        let summary = match (&params, args.method) {
            (Some(p), _) => evaluate(p, &set, bucket, args.iterations.unwrap_or(p.iterations))?,
            (None, EvalMethod::ZeroFill) => evaluate_zero_fill(&set, bucket)?,
            (None, _) => ground_truth_summary(&set, bucket)?,
        };
        rows.push(EvalRow {
            method: args.method,
            summary,
        });
    }
    let mut text = format!(
        "{:<12} {:<7} {:>5} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>9}\n",
        "method", "bucket", "n", "psnr_l", "psnr_r", "psnr", "ssim_l", "ssim_r", "ssim", "hole_l1"
    );
    for r in &rows {
        let s = &r.summary;
        let _ = writeln!(
            text,
            "{:<12} {:<7} {:>5} {:>8.3} {:>8.3} {:>8.3} {:>7.4} {:>7.4} {:>7.4} {:>9.5}",
            r.method.as_str(),
            s.bucket.as_str(),
            s.count,
            s.psnr_left,
            s.psnr_right,
            s.psnr(),
            s.ssim_left,
            s.ssim_right,
            s.ssim(),
            s.masked_l1
        );
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    emit(out, &text)?;
    emit(out, "\n")?;
    emit(out, &csv)?;
    if let Some(dir) = &args.out_dir {
        write_file(&dir.join("eval.csv"), csv.as_bytes())?;
    }
    Ok(rows)
}

/// Runs the finite-difference suite; returns whether every op passed.
pub fn cmd_gradcheck(out: &mut dyn Write) -> Result<bool> {
    let results = gradcheck::run_all()?;
    let mut text = format!(
        "{:<8} {:<24} {:>12} {:>9} {:>8} {:>8}  status\n",
        "group", "op", "max_rel_err", "tolerance", "compared", "skipped"
    );
    for r in &results {
        let _ = writeln!(
            text,
            "{:<8} {:<24} {:>12.3e} {:>9.0e} {:>8} {:>8}  {}",
            r.group,
            r.name,
            r.max_error,
            r.tolerance,
            r.compared,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(
        text,
        "{} of {} ops passed (eps {}, seeds {:?})",
        results.len() - failed,
        results.len(),
        gradcheck::EPS,
        gradcheck::SEEDS
    );
    emit(out, &text)?;
    Ok(failed == 0)
}
