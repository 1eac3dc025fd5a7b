//! Convolution kernels shared by the 2D and 3D paths.
//!
//! Everything runs as a 3D cross-correlation; a 2D convolution is the
//! special case with unit depth, unit depth-kernel and no depth padding.
//! The forward pass lowers each sample to a column matrix and accumulates
//! `out[co] += w[co, k] * col[k]` for `k` in ascending order, which is the
//! same per-element summation order as a plain nested loop over
//! `(ci, kd, kh, kw)` starting from the bias.

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Resolves geometry from an `[N,C,H,W]` or `[N,C,D,H,W]` input.
    pub fn resolve(input: &[usize], weight: &[usize], bias: &[usize], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let spatial = spec.kernel_dims.len();
        if !(spatial == 2 || spatial == 3) {
            return Err(Error::invalid(format!(
                "only 2D and 3D convolutions are supported, got {spatial} kernel dims"
            )));
        }
        if input.len() != spatial + 2 {
            return Err(Error::shape(
                "conv",
                format!("input rank {} does not match {spatial}D kernel (input shape {input:?})", input.len()),
            ));
        }
        let expected_w = spec.weight_shape();
        if weight != expected_w.as_slice() {
            return Err(Error::shape(
                "conv",
                format!("weight shape {weight:?}, expected {expected_w:?}"),
            ));
        }
        if bias != [spec.out_channels] {
            return Err(Error::shape(
                "conv",
                format!("bias shape {bias:?}, expected [{}]", spec.out_channels),
            ));
        }
        if input[1] != spec.in_channels {
            return Err(Error::shape(
                "conv",
                format!("input has {} channels, layer expects {}", input[1], spec.in_channels),
            ));
        }
        let (in3, k3, s3, p3) = if spatial == 2 {
            (
                [1, input[2], input[3]],
                [1, spec.kernel_dims[0], spec.kernel_dims[1]],
                [1, spec.stride, spec.stride],
                [0, spec.padding, spec.padding],
            )
        } else {
            (
                [input[2], input[3], input[4]],
                [spec.kernel_dims[0], spec.kernel_dims[1], spec.kernel_dims[2]],
                [spec.stride; 3],
                [spec.padding; 3],
            )
        };
        let mut out3 = [0usize; 3];
        for a in 0..3 {
            let padded = in3[a] + 2 * p3[a];
            if padded < k3[a] {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "axis extent {} (padding {}) smaller than kernel {}",
                        in3[a], p3[a], k3[a]
                    ),
                ));
            }
            out3[a] = (padded - k3[a]) / s3[a] + 1;
        }
        Ok(Self {
            n: input[0],
            ci: spec.in_channels,
            co: spec.out_channels,
            input: in3,
            kernel: k3,
            stride: s3,
            pad: p3,
            output: out3,
        })
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the column matrix.
    pub fn k_rows(&self) -> usize {
        self.ci * self.k_volume()
    }

    pub fn output_shape(&self, spatial: usize) -> Vec<usize> {
        if spatial == 2 {
            vec![self.n, self.co, self.output[1], self.output[2]]
        } else {
            vec![self.n, self.co, self.output[0], self.output[1], self.output[2]]
        }
    }

    /// For one kernel offset along an axis, the range of output positions
    /// whose input coordinate lands inside the image.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (inp, out, s, p) = (self.input[axis] as isize, self.output[axis], self.stride[axis] as isize, self.pad[axis] as isize);
        let k = k as isize;
        // input coord = o*s + k - p must be in [0, inp)
        let mut lo = 0usize;
        while lo < out && (lo as isize) * s + k - p < 0 {
            lo += 1;
        }
        let mut hi = out;
        while hi > lo && ((hi - 1) as isize) * s + k - p >= inp {
            hi -= 1;
        }
        (lo, hi)
    }
}

/// Lowers one sample `[ci, d, h, w]` into a `[ci*kd*kh*kw, od*oh*ow]` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p_len = g.out_volume();
    let mut col = vec![0.0f32; g.k_rows() * p_len];
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (da, db) = g.valid_range(0, a);
            for b in 0..kh {
                let (ha, hb) = g.valid_range(1, b);
                for e in 0..kw {
                    let (wa, wb) = g.valid_range(2, e);
                    let dst = &mut col[row * p_len..(row + 1) * p_len];
                    for z in da..db {
                        let iz = z * sd + a - pd;
                        for y in ha..hb {
                            let iy = y * sh + b - ph;
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if sw == 1 {
                                let ix0 = wa + e - pw;
                                drow[wa..wb].copy_from_slice(&src[ix0..ix0 + (wb - wa)]);
                            } else {
                                for xo in wa..wb {
                                    drow[xo] = src[xo * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    let _ = od;
    col
}

/// Scatters column-matrix gradients back onto the input sample.
pub(crate) fn col2im(dcol: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p_len = g.out_volume();
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (da, db) = g.valid_range(0, a);
            for b in 0..kh {
                let (ha, hb) = g.valid_range(1, b);
                for e in 0..kw {
                    let (wa, wb) = g.valid_range(2, e);
                    let src = &dcol[row * p_len..(row + 1) * p_len];
                    for z in da..db {
                        let iz = z * sd + a - pd;
                        for y in ha..hb {
                            let iy = y * sh + b - ph;
                            let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let drow = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let ix0 = wa + e - pw;
                                for (dv, &sv) in drow[ix0..ix0 + (wb - wa)].iter_mut().zip(&srow[wa..wb]) {
                                    *dv += sv;
                                }
                            } else {
                                for xo in wa..wb {
                                    drow[xo * sw + e - pw] += srow[xo];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward pass. Returns the output tensor and the per-sample column
/// matrices, which the backward pass reuses.
pub(crate) fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, ConvGeom, Vec<Vec<f32>>)> {
    let g = ConvGeom::resolve(input.shape(), weight.shape(), bias.shape(), spec)?;
    let in_len = g.ci * g.in_volume();
    let p_len = g.out_volume();
    let k_rows = g.k_rows();
    let w = weight.data();
    let mut out = vec![0.0f32; g.n * g.co * p_len];
    let mut cols = Vec::with_capacity(g.n);
    for n in 0..g.n {
        let col = im2col(&input.data()[n * in_len..(n + 1) * in_len], &g);
        let out_n = &mut out[n * g.co * p_len..(n + 1) * g.co * p_len];
        for (co, o) in out_n.chunks_exact_mut(p_len).enumerate() {
            o.fill(bias.data()[co]);
        }
        forward_rows(w, &col, k_rows, p_len, out_n);
        cols.push(col);
    }
    let spatial = spec.kernel_dims.len();
    let out = Tensor::new(g.output_shape(spatial), out)?;
    Ok((out, g, cols))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    dout: &[f32],
    weight: &[f32],
    g: &ConvGeom,
    cols: &[Vec<f32>],
    need: [bool; 3],
) -> ConvGrads {
    let p_len = g.out_volume();
    let k_rows = g.k_rows();
    let in_len = g.ci * g.in_volume();
    let mut dx = need[0].then(|| vec![0.0f32; g.n * in_len]);
    let mut dw = need[1].then(|| vec![0.0f32; g.co * k_rows]);
    let mut db = need[2].then(|| vec![0.0f32; g.co]);
    for n in 0..g.n {
        let dout_n = &dout[n * g.co * p_len..(n + 1) * g.co * p_len];
        if let Some(db) = db.as_mut() {
            for co in 0..g.co {
                db[co] += dout_n[co * p_len..(co + 1) * p_len].iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            weight_grad(dout_n, &cols[n], g.co, k_rows, p_len, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dcol = column_grad(dout_n, weight, g.co, k_rows, p_len);
            col2im(&dcol, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

const TILE: usize = 16;
const LANES: usize = 8;

/// `out[co, p] += sum_k w[co, k] * col[k, p]`, `k` ascending per element.
/// `out` arrives holding the bias.
fn forward_rows(w: &[f32], col: &[f32], k_rows: usize, p_len: usize, out: &mut [f32]) {
    let co_total = out.len() / p_len;
    let mut co = 0;
    while co + 4 <= co_total {
        forward_block::<4>(w, col, k_rows, p_len, co, out);
        co += 4;
    }
    while co < co_total {
        forward_block::<1>(w, col, k_rows, p_len, co, out);
        co += 1;
    }
}

#[inline(always)]
fn forward_block<const R: usize>(w: &[f32], col: &[f32], k_rows: usize, p_len: usize, co: usize, out: &mut [f32]) {
    let wr: [&[f32]; R] = std::array::from_fn(|r| &w[(co + r) * k_rows..(co + r + 1) * k_rows]);
    let mut p0 = 0;
    while p0 + TILE <= p_len {
        let mut acc = [[0.0f32; TILE]; R];
        for r in 0..R {
            acc[r].copy_from_slice(&out[(co + r) * p_len + p0..(co + r) * p_len + p0 + TILE]);
        }
        for k in 0..k_rows {
            let c: &[f32; TILE] = col[k * p_len + p0..k * p_len + p0 + TILE].try_into().unwrap();
            for r in 0..R {
                let wv = wr[r][k];
                for i in 0..TILE {
                    acc[r][i] += wv * c[i];
                }
            }
        }
        for r in 0..R {
            out[(co + r) * p_len + p0..(co + r) * p_len + p0 + TILE].copy_from_slice(&acc[r]);
        }
        p0 += TILE;
    }
    if p0 < p_len {
        for r in 0..R {
            let o = &mut out[(co + r) * p_len..(co + r + 1) * p_len];
            for k in 0..k_rows {
                let wv = wr[r][k];
                let c = &col[k * p_len..(k + 1) * p_len];
                for p in p0..p_len {
                    o[p] += wv * c[p];
                }
            }
        }
    }
}

/// `dw[co, k] += sum_p d[co, p] * col[k, p]` with fixed lane-wise partial sums.
fn weight_grad(d: &[f32], col: &[f32], co_total: usize, k_rows: usize, p_len: usize, dw: &mut [f32]) {
    let mut co = 0;
    while co + 4 <= co_total {
        let dr: [&[f32]; 4] = std::array::from_fn(|r| &d[(co + r) * p_len..(co + r + 1) * p_len]);
        for k in 0..k_rows {
            let c = &col[k * p_len..(k + 1) * p_len];
            let mut a0 = [0.0f32; LANES];
            let mut a1 = [0.0f32; LANES];
            let mut a2 = [0.0f32; LANES];
            let mut a3 = [0.0f32; LANES];
            let chunks = c
                .chunks_exact(LANES)
                .zip(dr[0].chunks_exact(LANES))
                .zip(dr[1].chunks_exact(LANES))
                .zip(dr[2].chunks_exact(LANES))
                .zip(dr[3].chunks_exact(LANES));
            for ((((cv, d0), d1), d2), d3) in chunks {
                let cv: &[f32; LANES] = cv.try_into().unwrap();
                let d0: &[f32; LANES] = d0.try_into().unwrap();
                let d1: &[f32; LANES] = d1.try_into().unwrap();
                let d2: &[f32; LANES] = d2.try_into().unwrap();
                let d3: &[f32; LANES] = d3.try_into().unwrap();
                for i in 0..LANES {
                    a0[i] += d0[i] * cv[i];
                    a1[i] += d1[i] * cv[i];
                    a2[i] += d2[i] * cv[i];
                    a3[i] += d3[i] * cv[i];
                }
            }
            let full = p_len / LANES * LANES;
            for (r, acc) in [a0, a1, a2, a3].iter().enumerate() {
                let mut s: f32 = acc.iter().sum();
                for q in full..p_len {
                    s += dr[r][q] * c[q];
                }
                dw[(co + r) * k_rows + k] += s;
            }
        }
        co += 4;
    }
    while co < co_total {
        let dr = &d[co * p_len..(co + 1) * p_len];
        for k in 0..k_rows {
            dw[co * k_rows + k] += dot(dr, &col[k * p_len..(k + 1) * p_len]);
        }
        co += 1;
    }
}

/// `dcol[k, p] = sum_co w[co, k] * d[co, p]`, `co` ascending.
fn column_grad(d: &[f32], w: &[f32], co_total: usize, k_rows: usize, p_len: usize) -> Vec<f32> {
    let mut dcol = vec![0.0f32; k_rows * p_len];
    let mut k = 0;
    while k + 4 <= k_rows {
        column_block::<4>(d, w, co_total, k_rows, p_len, k, &mut dcol);
        k += 4;
    }
    while k < k_rows {
        column_block::<1>(d, w, co_total, k_rows, p_len, k, &mut dcol);
        k += 1;
    }
    dcol
}

#[inline(always)]
fn column_block<const R: usize>(d: &[f32], w: &[f32], co_total: usize, k_rows: usize, p_len: usize, k: usize, dcol: &mut [f32]) {
    let mut p0 = 0;
    while p0 + TILE <= p_len {
        let mut acc = [[0.0f32; TILE]; R];
        for co in 0..co_total {
            let dv: &[f32; TILE] = d[co * p_len + p0..co * p_len + p0 + TILE].try_into().unwrap();
            for r in 0..R {
                let wv = w[co * k_rows + k + r];
                for i in 0..TILE {
                    acc[r][i] += wv * dv[i];
                }
            }
        }
        for r in 0..R {
            dcol[(k + r) * p_len + p0..(k + r) * p_len + p0 + TILE].copy_from_slice(&acc[r]);
        }
        p0 += TILE;
    }
    if p0 < p_len {
        for r in 0..R {
            let row = &mut dcol[(k + r) * p_len..(k + r + 1) * p_len];
            for co in 0..co_total {
                let wv = w[co * k_rows + k + r];
                for p in p0..p_len {
                    row[p] += wv * d[co * p_len + p];
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[f32; LANES] = x.try_into().unwrap();
        let y: &[f32; LANES] = y.try_into().unwrap();
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb.iter()) {
        s += x * y;
    }
    s
}
