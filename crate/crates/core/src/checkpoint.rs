//! Model checkpoints: a plain-text header followed by TNSR records.
//!
//! ```text
//! STEREOPAINT-CHECKPOINT 1
//! encoder_channels = 8,16
//! ...
//! tensors 42
//! encoder.0.feature_weight 0 8 4 3 3
//! ...
//! end
//! <TNSR records, offsets relative to the first byte after "end\n">
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaa::AggregationMode;
use crate::network::{ModelParams, NetConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "STEREOPAINT-CHECKPOINT 1";

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn named_tensors(p: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = p
        .generator
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    p.discriminator.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
    for (i, st) in p.discriminator.norms.iter().enumerate() {
        let u = Tensor::new(vec![st.u.len()], st.u.clone()).expect("non-empty u");
        out.push((format!("disc.{i}.u"), u));
    }
    out
}

pub fn to_bytes(p: &ModelParams) -> Vec<u8> {
    let c = &p.config;
    let tensors = named_tensors(p);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("encoder_channels = {}\n", join(&c.encoder_channels)));
    header.push_str(&format!("decoder_channels = {}\n", join(&c.decoder_channels)));
    header.push_str(&format!("fullres_channels = {}\n", c.fullres_channels));
    header.push_str(&format!("disparity_levels = {}\n", c.disparity_levels));
    header.push_str(&format!("mode = {}\n", c.mode.as_str()));
    header.push_str(&format!("disc_channels = {}\n", join(&c.disc_channels)));
    header.push_str(&format!("lambda_adv = {}\n", p.lambda_adv));
    header.push_str(&format!("iterations = {}\n", p.iterations));
    header.push_str(&format!("tensors {}\n", tensors.len()));
    let mut blob = Vec::new();
    for (name, t) in &tensors {
        header.push_str(&format!("{name} {}", blob.len()));
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        blob.extend(t.to_tnsr_bytes());
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(blob);
    out
}

pub fn save(p: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn perr(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

fn parse_list<const N: usize>(v: &str, offset: usize) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| perr(offset, format!("bad list '{v}'")))?;
    items
        .try_into()
        .map_err(|_| perr(offset, format!("expected {N} values in '{v}'")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    // Header lines are ASCII; read them one by one and track offsets.
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| perr(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| perr(start, "header is not UTF-8"))?;
        *pos = end + 1;
        Ok((start, line.to_string()))
    };
    let (_, magic) = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(perr(0, format!("bad magic '{magic}'")));
    }
    let mut cfg = NetConfig::default();
    let mut lambda_adv = None;
    let mut iterations = None;
    let count;
    loop {
        let (off, line) = next_line(&mut pos)?;
        if let Some(n) = line.strip_prefix("tensors ") {
            count = n.trim().parse::<usize>().map_err(|_| perr(off, "bad tensor count"))?;
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| perr(off, format!("expected key = value, got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| v.parse::<usize>().map_err(|_| perr(off, format!("bad number for {k}")));
        match k {
            "encoder_channels" => cfg.encoder_channels = parse_list(v, off)?,
            "decoder_channels" => cfg.decoder_channels = parse_list(v, off)?,
            "fullres_channels" => cfg.fullres_channels = num(v)?,
            "disparity_levels" => cfg.disparity_levels = num(v)?,
            "mode" => cfg.mode = v.parse::<AggregationMode>().map_err(|e| perr(off, e.to_string()))?,
            "disc_channels" => cfg.disc_channels = parse_list(v, off)?,
            "lambda_adv" => lambda_adv = Some(v.parse::<f32>().map_err(|_| perr(off, "bad lambda_adv"))?),
            "iterations" => iterations = Some(num(v)?),
            _ => return Err(perr(off, format!("unknown key '{k}'"))),
        }
    }
    cfg.validate()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (off, line) = next_line(&mut pos)?;
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| perr(off, "empty tensor line"))?.to_string();
        let nums: Vec<usize> = parts
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(off, format!("bad tensor entry '{line}'")))?;
        if nums.len() < 2 {
            return Err(perr(off, format!("tensor entry '{line}' lacks offset or dims")));
        }
        entries.push((off, name, nums[0], nums[1..].to_vec()));
    }
    let (off, end) = next_line(&mut pos)?;
    if end != "end" {
        return Err(perr(off, "expected 'end' after tensor table"));
    }
    let blob = &bytes[pos..];

    let mut params = ModelParams::init(cfg, 0)?;
    params.lambda_adv = lambda_adv.ok_or_else(|| perr(0, "missing lambda_adv"))?;
    params.iterations = iterations.ok_or_else(|| perr(0, "missing iterations"))?;
    let mut loaded = std::collections::BTreeMap::new();
    for (off, name, offset, dims) in entries {
        if offset > blob.len() {
            return Err(perr(pos + offset, format!("tensor {name} starts past end of file")));
        }
        let (t, _) = Tensor::from_tnsr_bytes(&blob[offset..]).map_err(|e| match e {
            Error::Parse { offset: o, msg } => perr(pos + offset + o, format!("{name}: {msg}")),
            other => other,
        })?;
        if t.shape() != dims.as_slice() {
            return Err(perr(off, format!("{name}: table says {dims:?}, record has {:?}", t.shape())));
        }
        loaded.insert(name, t);
    }
    let mut take = |name: &str, target: &mut Tensor| -> Result<()> {
        let t = loaded
            .remove(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != target.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: stored {:?}, model expects {:?}", t.shape(), target.shape()),
            ));
        }
        *target = t;
        Ok(())
    };
    for (name, slot) in params.generator.params_mut() {
        take(&name, slot)?;
    }
    let mut disc_slots = Vec::new();
    params.discriminator.visit(&mut |n, _| disc_slots.push(n.to_string()));
    let mut i = 0;
    let mut result = Ok(());
    params.discriminator.visit_mut(&mut |_, t| {
        if result.is_ok() {
            result = take(&disc_slots[i], t);
        }
        i += 1;
    });
    result?;
    for (i, st) in params.discriminator.norms.iter_mut().enumerate() {
        let mut u = Tensor::new(vec![st.u.len()], st.u.clone())?;
        take(&format!("disc.{i}.u"), &mut u)?;
        st.u = u.into_data();
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::invalid(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(params)
}
