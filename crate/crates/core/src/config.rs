//! Run configuration: flat `key = value` files plus defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::MaskBucket;
use crate::error::{Error, Result};
use crate::gaa::AggregationMode;
use crate::icg::validate_iterations;
use crate::network::{NetConfig, DEFAULT_ITERATIONS, DEFAULT_LAMBDA_ADV};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    /// Cost-volume levels `D`.
    pub d_levels: usize,
    /// Cross-guidance iterations `T`.
    pub iterations: usize,
    pub lambda_adv: f32,
    pub learning_rate: f32,
    pub disc_learning_rate: f32,
    pub momentum: f32,
    pub clip_norm: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub ablation: AggregationMode,
    pub bucket: MaskBucket,
    pub train_count: usize,
    pub test_count: usize,
    pub encoder_channels: [usize; 2],
    pub decoder_channels: [usize; 2],
    pub fullres_channels: usize,
    pub disc_channels: [usize; 3],
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            height: 32,
            width: 32,
            max_disp: 8,
            d_levels: net.disparity_levels,
            iterations: DEFAULT_ITERATIONS,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            learning_rate: train.learning_rate,
            disc_learning_rate: train.disc_learning_rate,
            momentum: train.momentum,
            clip_norm: train.clip_norm,
            epochs: train.epochs,
            batch_size: train.batch_size,
            ablation: AggregationMode::Gaa,
            bucket: MaskBucket::B20_40,
            train_count: 200,
            test_count: 40,
            encoder_channels: net.encoder_channels,
            decoder_channels: net.decoder_channels,
            fullres_channels: net.fullres_channels,
            disc_channels: net.disc_channels,
            dataset_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value for {key}: {v:?}")))
}

fn parse_widths<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items = v
        .split(',')
        .map(|x| parse_num::<usize>(key, x.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::invalid(format!("{key} takes {N} comma-separated widths, got {v:?}")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "seed",
        "height",
        "width",
        "max_disp",
        "d_levels",
        "iterations",
        "lambda_adv",
        "learning_rate",
        "disc_learning_rate",
        "momentum",
        "clip_norm",
        "epochs",
        "batch_size",
        "ablation",
        "bucket",
        "train_count",
        "test_count",
        "encoder_channels",
        "decoder_channels",
        "fullres_channels",
        "disc_channels",
        "dataset_dir",
        "checkpoint",
        "out_dir",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "max_disp" => self.max_disp = parse_num(key, v)?,
            "d_levels" => self.d_levels = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "lambda_adv" => self.lambda_adv = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "disc_learning_rate" => self.disc_learning_rate = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "bucket" => self.bucket = v.parse()?,
            "train_count" => self.train_count = parse_num(key, v)?,
            "test_count" => self.test_count = parse_num(key, v)?,
            "encoder_channels" => self.encoder_channels = parse_widths(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_widths(key, v)?,
            "fullres_channels" => self.fullres_channels = parse_num(key, v)?,
            "disc_channels" => self.disc_channels = parse_widths(key, v)?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("max_disp", self.max_disp.to_string());
        put("d_levels", self.d_levels.to_string());
        put("iterations", self.iterations.to_string());
        put("lambda_adv", self.lambda_adv.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("disc_learning_rate", self.disc_learning_rate.to_string());
        put("momentum", self.momentum.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("ablation", self.ablation.as_str().to_string());
        put("bucket", self.bucket.to_string());
        put("train_count", self.train_count.to_string());
        put("test_count", self.test_count.to_string());
        put("encoder_channels", join(&self.encoder_channels));
        put("decoder_channels", join(&self.decoder_channels));
        put("fullres_channels", self.fullres_channels.to_string());
        put("disc_channels", join(&self.disc_channels));
        put("dataset_dir", self.dataset_dir.display().to_string());
        put("checkpoint", self.checkpoint.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        validate_iterations(self.iterations)?;
        if self.d_levels == 0 {
            return Err(Error::invalid("d_levels must be at least 1"));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::invalid("lambda_adv must be finite and non-negative"));
        }
        self.net_config().validate()?;
        self.train_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            encoder_channels: self.encoder_channels,
            decoder_channels: self.decoder_channels,
            fullres_channels: self.fullres_channels,
            disparity_levels: self.d_levels,
            mode: self.ablation,
            disc_channels: self.disc_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            disc_learning_rate: self.disc_learning_rate,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dataset_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.dataset_dir.join("test")
    }
}
