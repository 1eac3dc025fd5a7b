//! Dense row-major `f32` tensors and the `TNSR` binary format.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic prefix of a serialized tensor.
pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// N-dimensional array of 32-bit floats in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(f).collect();
        Self::new(shape.to_vec(), data).expect("from_fn shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.shape.iter())
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Serializes as `TNSR`, u32 LE rank, u32 LE dims, then LE `f32` values.
    pub fn write_tnsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TNSR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_tnsr(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = *pos + n;
            if end > bytes.len() {
                return Err(Error::Parse {
                    offset: *pos,
                    msg: format!("truncated tensor: need {n} bytes, {} left", bytes.len() - *pos),
                });
            }
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != TNSR_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"TNSR\""),
            });
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = pos;
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::Parse {
                    offset: at,
                    msg: "zero dimension".into(),
                });
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { shape, data }, pos))
    }

    pub fn read_tnsr<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
        let (t, used) = Self::from_tnsr_bytes(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Parse {
                offset: used,
                msg: format!("{} trailing bytes after tensor", bytes.len() - used),
            });
        }
        Ok(t)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Geometry of a convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel extent per spatial axis; every entry must be odd.
    pub kernel_dims: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new2d(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_dims: vec![k, k],
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn new3d(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_dims: vec![k, k, k],
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_dims.is_empty() || self.kernel_dims.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::invalid(format!(
                "kernel dims must be odd and positive, got {:?}",
                self.kernel_dims
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!(
                "stride and channel counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output extent along one axis, or an error when it would be < 1.
    pub fn output_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::shape(
                "conv",
                format!("input extent {input} with padding {} is smaller than kernel {kernel}", self.padding),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel_dims);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_dims.iter().product::<usize>()
    }
}
