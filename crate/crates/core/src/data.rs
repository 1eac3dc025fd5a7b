//! Synthetic rectified stereo pairs, free-form masks and dataset directories.
//!
//! Scenes are stacks of fronto-parallel rectangles, each with one integer
//! disparity and a procedural texture defined on the whole plane. Both views
//! are rendered from the same scene, so a left pixel whose layer is visible
//! in the right view satisfies `left[y, x] = right[y, x - d]` exactly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::pnm;
use crate::tensor::Tensor;

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one stream of one sample.
pub fn sub_seed(seed: u64, index: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ index) ^ stream)
}

const STREAM_SCENE: u64 = 0;
const STREAM_MASK_LEFT: u64 = 1;
const STREAM_MASK_RIGHT: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub y_left: Tensor,
    pub y_right: Tensor,
    /// `[1, H, W]`, left-view coordinates.
    pub gt_disparity: Tensor,
    pub m_left: BinaryMask,
    pub m_right: BinaryMask,
    pub x_left: Tensor,
    pub x_right: Tensor,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.y_left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.y_left.shape()[2]
    }

    /// Replaces both masks and recomputes the masked inputs.
    pub fn with_masks(mut self, m_left: BinaryMask, m_right: BinaryMask) -> Result<Self> {
        self.x_left = apply_mask(&self.y_left, &m_left)?;
        self.x_right = apply_mask(&self.y_right, &m_right)?;
        self.m_left = m_left;
        self.m_right = m_right;
        Ok(self)
    }
}

/// `image * mask` broadcast over channels.
pub fn apply_mask(image: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(Error::shape(
            "apply_mask",
            format!("image {s:?} vs mask {:?}", mask.tensor().shape()),
        ));
    }
    image.zip_map(&mask.expand(s[0]).into_reshaped(s)?, |a, b| a * b)
}

/// Plane texture: base color plus two oriented sinusoids and a checker.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub amp: [f64; 3],
    pub freq: [(f64, f64); 2],
    pub phase: [f64; 2],
    pub checker: usize,
}

impl Texture {
    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            base: color,
            amp: [0.0; 3],
            freq: [(0.0, 0.0); 2],
            phase: [0.0; 2],
            checker: 0,
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut base = [0.0; 3];
        let mut amp = [0.0; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(0.2..0.8);
            amp[c] = rng.gen_range(0.05..0.2);
        }
        let mut freq = [(0.0, 0.0); 2];
        let mut phase = [0.0; 2];
        for i in 0..2 {
            let scale = [0.15, 0.6][i];
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let f: f64 = rng.gen_range(0.5..1.5) * scale;
            freq[i] = (f * angle.cos(), f * angle.sin());
            phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Self {
            base,
            amp,
            freq,
            phase,
            checker: rng.gen_range(3..9),
        }
    }

    /// Value at integer plane coordinates, quantized to 8 bits.
    pub fn sample(&self, y: i64, x: i64, c: usize) -> f32 {
        let mut v = self.base[c];
        for i in 0..2 {
            let (fx, fy) = self.freq[i];
            let s = (fx * x as f64 + fy * y as f64 + self.phase[i] + c as f64).sin();
            v += 0.5 * self.amp[c] * s;
        }
        if self.checker > 0 {
            let k = self.checker as i64;
            let parity = (x.div_euclid(k) + y.div_euclid(k)).rem_euclid(2);
            v += if parity == 0 { 0.5 } else { -0.5 } * self.amp[c];
        }
        (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
    }
}

/// A rectangle in left-view coordinates; the right view sees it at
/// `x - disparity`. Textures are attached to right-view coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub top: i64,
    pub left: i64,
    pub height: i64,
    pub width: i64,
    pub disparity: usize,
    pub texture: Texture,
}

impl Layer {
    fn covers_left(&self, y: i64, x: i64) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    fn covers_right(&self, y: i64, x: i64) -> bool {
        self.covers_left(y, x + self.disparity as i64)
    }
}

/// Layers are painted in order; later layers occlude earlier ones. The
/// first layer should cover the whole frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub left: Tensor,
    pub right: Tensor,
    pub disparity: Tensor,
}

impl Scene {
    /// Renders both views. Pixels not covered by any layer are black with
    /// disparity 0.
    pub fn render(&self, h: usize, w: usize) -> RenderedPair {
        let plane = h * w;
        let mut left = vec![0.0f32; 3 * plane];
        let mut right = vec![0.0f32; 3 * plane];
        let mut disp = vec![0.0f32; plane];
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i64, x as i64);
                let i = y * w + x;
                if let Some(l) = self.layers.iter().rev().find(|l| l.covers_left(yi, xi)) {
                    let xr = xi - l.disparity as i64;
                    for c in 0..3 {
                        left[c * plane + i] = l.texture.sample(yi, xr, c);
                    }
                    disp[i] = l.disparity as f32;
                }
                if let Some(l) = self.layers.iter().rev().find(|l| l.covers_right(yi, xi)) {
                    for c in 0..3 {
                        right[c * plane + i] = l.texture.sample(yi, xi, c);
                    }
                }
            }
        }
        RenderedPair {
            left: Tensor::new(vec![3, h, w], left).expect("sized"),
            right: Tensor::new(vec![3, h, w], right).expect("sized"),
            disparity: Tensor::new(vec![1, h, w], disp).expect("sized"),
        }
    }

    /// Background plus 1 to 3 foreground rectangles, nearer layers having
    /// larger disparity.
    pub fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, max_disp: usize) -> Self {
        let count = rng.gen_range(2..=4);
        let mut disps: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=max_disp)).collect();
        disps.sort_unstable();
        let (h, w) = (h as i64, w as i64);
        let mut layers = Vec::with_capacity(count);
        for (k, d) in disps.into_iter().enumerate() {
            let (top, left, height, width) = if k == 0 {
                (0, 0, h, w + max_disp as i64)
            } else {
                let height = rng.gen_range(h / 4..=h * 3 / 4);
                let width = rng.gen_range(w / 4..=w * 3 / 4);
                (
                    rng.gen_range(0..=h - height),
                    rng.gen_range(0..=w - width),
                    height,
                    width,
                )
            };
            layers.push(Layer {
                top,
                left,
                height,
                width,
                disparity: d,
                texture: Texture::random(rng),
            });
        }
        Scene { layers }
    }
}

pub fn check_geometry(h: usize, w: usize, max_disp: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!("image size {h}x{w} must be positive multiples of 4")));
    }
    if max_disp > w / 4 {
        return Err(Error::invalid(format!(
            "max_disp {max_disp} too large for width {w} (limit {})",
            w / 4
        )));
    }
    Ok(())
}

/// Unmasked sample: both masks all-known.
pub fn gen_synthetic_stereo(seed: u64, h: usize, w: usize, max_disp: usize) -> Result<StereoSample> {
    check_geometry(h, w, max_disp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = Scene::random(&mut rng, h, w, max_disp).render(h, w);
    Ok(StereoSample {
        x_left: pair.left.clone(),
        x_right: pair.right.clone(),
        y_left: pair.left,
        y_right: pair.right,
        gt_disparity: pair.disparity,
        m_left: BinaryMask::ones(h, w),
        m_right: BinaryMask::ones(h, w),
    })
}

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskBucket {
    B0_20,
    B20_40,
    B40_60,
}

impl MaskBucket {
    pub const ALL: [MaskBucket; 3] = [MaskBucket::B0_20, MaskBucket::B20_40, MaskBucket::B40_60];

    /// Half-open ratio interval `(lo, hi]`.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            MaskBucket::B0_20 => (0.0, 0.2),
            MaskBucket::B20_40 => (0.2, 0.4),
            MaskBucket::B40_60 => (0.4, 0.6),
        }
    }

    pub fn contains(self, ratio: f64) -> bool {
        let (lo, hi) = self.bounds();
        ratio > lo && ratio <= hi
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskBucket::B0_20 => "b0_20",
            MaskBucket::B20_40 => "b20_40",
            MaskBucket::B40_60 => "b40_60",
        }
    }
}

impl fmt::Display for MaskBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b0_20" => Ok(MaskBucket::B0_20),
            "b20_40" => Ok(MaskBucket::B20_40),
            "b40_60" => Ok(MaskBucket::B40_60),
            _ => Err(Error::invalid(format!(
                "unknown mask bucket '{s}' (expected b0_20, b20_40 or b40_60)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub bucket: MaskBucket,
    pub seed: u64,
    pub vertices: (usize, usize),
    pub max_segment: usize,
    pub widths: (usize, usize),
    /// Upper bound on proposed stroke segments.
    pub max_attempts: usize,
}

impl MaskSpec {
    pub fn new(bucket: MaskBucket, seed: u64) -> Self {
        Self {
            bucket,
            seed,
            vertices: (10, 40),
            max_segment: 10,
            widths: (3, 15),
            max_attempts: 20_000,
        }
    }
}

/// Pixels within `width / 2` of the segment `a -> b`.
fn stamp_segment(h: usize, w: usize, a: (f64, f64), b: (f64, f64), width: usize) -> Vec<usize> {
    let r = width as f64 / 2.0;
    let (x0, x1) = ((a.0.min(b.0) - r).floor().max(0.0) as usize, (a.0.max(b.0) + r).ceil() as usize);
    let (y0, y1) = ((a.1.min(b.1) - r).floor().max(0.0) as usize, (a.1.max(b.1) + r).ceil() as usize);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let mut out = Vec::new();
    for y in y0..=y1.min(h - 1) {
        for x in x0..=x1.min(w - 1) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= r * r {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Random-walk brush strokes added segment by segment until the missing
/// ratio reaches a target drawn inside the bucket. Segments that would
/// overshoot the bucket are discarded.
pub fn gen_irregular_mask(spec: &MaskSpec, h: usize, w: usize) -> Result<BinaryMask> {
    if h < 32 || w < 32 {
        return Err(Error::MaskGeneration(format!("masks need at least 32x32, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.bucket.bounds();
    let total = (h * w) as f64;
    let target = lo + (hi - lo) * rng.gen_range(0.1..0.9);
    let cap = (hi * total).floor() as usize;
    let mut missing = vec![false; h * w];
    let mut count = 0usize;
    let mut attempts = 0usize;
    while (count as f64) < target * total {
        let mut p = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let vertices = rng.gen_range(spec.vertices.0..=spec.vertices.1);
        let width = rng.gen_range(spec.widths.0..=spec.widths.1);
        for _ in 0..vertices {
            attempts += 1;
            if attempts > spec.max_attempts {
                return Err(Error::MaskGeneration(format!(
                    "ratio {:.3} not reached for bucket {} after {} segments",
                    target, spec.bucket, spec.max_attempts
                )));
            }
            angle += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(1.0..=spec.max_segment as f64);
            let q = (
                (p.0 + len * angle.cos()).clamp(0.0, w as f64),
                (p.1 + len * angle.sin()).clamp(0.0, h as f64),
            );
            let pixels = stamp_segment(h, w, p, q, width);
            let added = pixels.iter().filter(|&&i| !missing[i]).count();
            if count + added <= cap {
                for i in pixels {
                    missing[i] = true;
                }
                count += added;
                p = q;
            }
            if (count as f64) >= target * total {
                break;
            }
        }
    }
    let mask = BinaryMask::from_fn(h, w, |y, x| !missing[y * w + x]);
    debug_assert_eq!(mask.missing_count(), count);
    Ok(mask)
}

/// Fraction of missing (zero) pixels.
pub fn mask_ratio(m: &BinaryMask) -> f64 {
    m.missing_ratio()
}

/// Sample `index` of the stream identified by `seed`, with masks drawn from
/// `bucket`. Left and right masks use independent sub-seeds.
pub fn make_sample(seed: u64, index: u64, h: usize, w: usize, max_disp: usize, bucket: MaskBucket) -> Result<StereoSample> {
    let base = gen_synthetic_stereo(sub_seed(seed, index, STREAM_SCENE), h, w, max_disp)?;
    let (ml, mr) = sample_masks(seed, index, h, w, bucket)?;
    base.with_masks(ml, mr)
}

pub fn sample_masks(seed: u64, index: u64, h: usize, w: usize, bucket: MaskBucket) -> Result<(BinaryMask, BinaryMask)> {
    let ml = gen_irregular_mask(&MaskSpec::new(bucket, sub_seed(seed, index, STREAM_MASK_LEFT)), h, w)?;
    let mr = gen_irregular_mask(&MaskSpec::new(bucket, sub_seed(seed, index, STREAM_MASK_RIGHT)), h, w)?;
    Ok((ml, mr))
}

pub fn make_dataset(seed: u64, count: usize, h: usize, w: usize, max_disp: usize, bucket: MaskBucket) -> Result<Vec<StereoSample>> {
    make_dataset_range(seed, 0, count, h, w, max_disp, bucket)
}

/// Samples `first .. first + count` of the seeded stream.
pub fn make_dataset_range(
    seed: u64,
    first: usize,
    count: usize,
    h: usize,
    w: usize,
    max_disp: usize,
    bucket: MaskBucket,
) -> Result<Vec<StereoSample>> {
    check_geometry(h, w, max_disp)?;
    (first..first + count)
        .map(|i| make_sample(seed, i as u64, h, w, max_disp, bucket))
        .collect()
}

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    pub seed: u64,
    /// Stream index of the first sample.
    pub first_index: usize,
    pub bucket: MaskBucket,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "count = {}\nheight = {}\nwidth = {}\nmax_disp = {}\nseed = {}\nfirst_index = {}\nbucket = {}\n",
            self.count, self.height, self.width, self.max_disp, self.seed, self.first_index, self.bucket
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            count: 0,
            height: 0,
            width: 0,
            max_disp: 0,
            seed: 0,
            first_index: 0,
            bucket: MaskBucket::B20_40,
        };
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("manifest line without '=': {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::invalid(format!("manifest: bad number for {k}: {v}")))
            };
            match k {
                "count" => m.count = num(v)? as usize,
                "height" => m.height = num(v)? as usize,
                "width" => m.width = num(v)? as usize,
                "max_disp" => m.max_disp = num(v)? as usize,
                "seed" => m.seed = num(v)?,
                "first_index" => m.first_index = num(v)? as usize,
                "bucket" => m.bucket = v.parse()?,
                _ => return Err(Error::invalid(format!("manifest: unknown key {k}"))),
            }
            seen += 1;
        }
        if seen < 7 {
            return Err(Error::invalid("manifest is missing keys"));
        }
        Ok(m)
    }
}

fn file_name(i: usize, suffix: &str) -> String {
    format!("{i:04}_{suffix}")
}

/// Writes samples and a manifest into `dir` (created if needed).
pub fn write_dataset(dir: &Path, manifest: &Manifest, samples: &[StereoSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        pnm::write_image(&s.y_left, dir.join(file_name(i, "left.ppm")))?;
        pnm::write_image(&s.y_right, dir.join(file_name(i, "right.ppm")))?;
        pnm::write_mask(&s.m_left, dir.join(file_name(i, "mask_left.pgm")))?;
        pnm::write_mask(&s.m_right, dir.join(file_name(i, "mask_right.pgm")))?;
        let p = dir.join(file_name(i, "disp.tnsr"));
        fs::write(&p, s.gt_disparity.to_tnsr_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, manifest.to_text()).map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join("manifest.txt");
    Manifest::parse(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<StereoSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let y_left = pnm::read_image(dir.join(file_name(i, "left.ppm")))?;
        let y_right = pnm::read_image(dir.join(file_name(i, "right.ppm")))?;
        let m_left = pnm::read_mask(dir.join(file_name(i, "mask_left.pgm")))?;
        let m_right = pnm::read_mask(dir.join(file_name(i, "mask_right.pgm")))?;
        let p = dir.join(file_name(i, "disp.tnsr"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (gt_disparity, _) = Tensor::from_tnsr_bytes(&bytes)?;
        if y_left.shape() != [3, manifest.height, manifest.width] || y_right.shape() != y_left.shape() {
            return Err(Error::shape(
                "read_dataset",
                format!("sample {i}: image {:?} does not match manifest {}x{}", y_left.shape(), manifest.height, manifest.width),
            ));
        }
        samples.push(StereoSample {
            x_left: apply_mask(&y_left, &m_left)?,
            x_right: apply_mask(&y_right, &m_right)?,
            y_left,
            y_right,
            gt_disparity,
            m_left,
            m_right,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_disparity_gives_identical_views() {
        let s = gen_synthetic_stereo(3, 32, 32, 0).unwrap();
        assert_eq!(s.y_left, s.y_right);
        assert_eq!(s.gt_disparity.max_abs(), 0.0);
    }

    #[test]
    fn geometry_checks() {
        assert!(gen_synthetic_stereo(0, 30, 32, 2).is_err());
        assert!(gen_synthetic_stereo(0, 32, 32, 9).is_err());
        assert!(gen_synthetic_stereo(0, 32, 32, 8).is_ok());
    }

    #[test]
    fn bucket_parse_and_bounds() {
        for b in MaskBucket::ALL {
            assert_eq!(b.as_str().parse::<MaskBucket>().unwrap(), b);
        }
        assert!("b10_30".parse::<MaskBucket>().is_err());
        assert!(MaskBucket::B0_20.contains(0.2));
        assert!(!MaskBucket::B0_20.contains(0.0));
        assert!(!MaskBucket::B20_40.contains(0.2));
    }

    #[test]
    fn mask_ratio_cases() {
        assert_eq!(mask_ratio(&BinaryMask::ones(4, 4)), 0.0);
        assert_eq!(mask_ratio(&BinaryMask::zeros(4, 4)), 1.0);
        assert_eq!(mask_ratio(&BinaryMask::from_fn(4, 4, |y, x| (x + y) % 2 == 0)), 0.5);
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            count: 3,
            height: 32,
            width: 64,
            max_disp: 8,
            seed: 11,
            first_index: 200,
            bucket: MaskBucket::B40_60,
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("count = 3\n").is_err());
    }

    #[test]
    fn sub_seeds_differ_by_stream_and_index() {
        assert_ne!(sub_seed(0, 0, 1), sub_seed(0, 0, 2));
        assert_ne!(sub_seed(0, 0, 1), sub_seed(0, 1, 1));
        assert_eq!(sub_seed(5, 7, 1), sub_seed(5, 7, 1));
    }
}
