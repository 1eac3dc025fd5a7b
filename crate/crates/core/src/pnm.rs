//! Binary PPM (P6) images and PGM (P5) masks, 8-bit only.
//!
//! Images map to `[3, H, W]` tensors with values `byte / 255`. Mask files
//! use the external convention 255 = missing; they are inverted on read so
//! that the in-memory [`BinaryMask`] has 1 = known.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

fn skip_ws_and_comments(b: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < b.len() && b[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < b.len() && b[pos] == b'#' {
            while pos < b.len() && b[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(b: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_ws_and_comments(b, pos);
    let mut end = start;
    while end < b.len() && b[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, format!("expected {what}")));
    }
    let v: usize = std::str::from_utf8(&b[start..end])
        .unwrap()
        .parse()
        .map_err(|_| parse_err(start, format!("{what} out of range")))?;
    Ok((v, end))
}

fn parse_header(b: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if b.len() < 2 || &b[..2] != magic {
        let found = &b[..b.len().min(2)];
        return Err(parse_err(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let (width, pos) = read_uint(b, 2, "width")?;
    let (height, pos) = read_uint(b, pos, "height")?;
    let (maxval, pos) = read_uint(b, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(parse_err(pos, format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if pos >= b.len() || !b[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "missing whitespace after maxval"));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

fn payload<'a>(b: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = b.len() - h.data_offset;
    if have < need {
        return Err(parse_err(
            b.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    Ok(&b[h.data_offset..h.data_offset + need])
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_image", format!("expected [3,H,W], got {s:?}")));
    }
    let (hgt, wid) = (s[1], s[2]);
    let plane = hgt * wid;
    let mut out = format!("P6\n{wid} {hgt}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

/// PGM bytes to a mask; bytes >= 128 are missing.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let h = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &h, 1)?;
    let mut it = px.iter();
    Ok(BinaryMask::from_fn(h.height, h.width, |_, _| *it.next().unwrap() < 128))
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.tensor().data().iter().map(|&v| if v == 1.0 { 0u8 } else { 255u8 }));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_ppm(image)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_mask(mask))
}
