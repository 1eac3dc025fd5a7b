use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[1, H, W]` mask with entries exactly 0 or 1; 1 marks a known pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Tensor,
}

impl BinaryMask {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape("mask", format!("expected [1,H,W], got {s:?}")));
        }
        if let Some(bad) = values.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("mask entries must be 0 or 1, found {bad}")));
        }
        Ok(Self { values })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::ones(&[1, h, w]),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn from_fn(h: usize, w: usize, mut known: impl FnMut(usize, usize) -> bool) -> Self {
        let values = Tensor::from_fn(&[1, h, w], |i| if known(i / w, i % w) { 1.0 } else { 0.0 });
        Self { values }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.values.data()[y * self.width() + x] == 1.0
    }

    pub fn missing_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// Fraction of missing pixels.
    pub fn missing_ratio(&self) -> f64 {
        self.missing_count() as f64 / self.values.len() as f64
    }

    fn check_same(&self, op: &'static str, other: &BinaryMask) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.values.shape(), other.values.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise product (logical AND).
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same("mask_and", other)?;
        Ok(Self {
            values: self.values.zip_map(&other.values, |a, b| a * b)?,
        })
    }

    /// Elementwise maximum (logical OR).
    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same("mask_or", other)?;
        Ok(Self {
            values: self.values.zip_map(&other.values, f32::max)?,
        })
    }

    /// Pixels missing here and set in `other`: `(1 - self) * other`.
    pub fn holes_where(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same("mask_holes", other)?;
        Ok(Self {
            values: self.values.zip_map(&other.values, |m, o| (1.0 - m) * o)?,
        })
    }

    pub fn inverted(&self) -> BinaryMask {
        Self {
            values: self.values.map(|v| 1.0 - v),
        }
    }

    /// Repeats the mask over `channels`, as `[1, channels, H, W]`.
    pub fn expand(&self, channels: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            data.extend_from_slice(self.values.data());
        }
        Tensor::new(vec![1, channels, h, w], data).unwrap()
    }
}
