//! Geometry-aware attention over a disparity cost volume.
//!
//! Feature maps are channel-first `[1, C, H, W]`. The cost volume is
//! `[1, 2C, D, H, W]`: channels `0..C` repeat the target features at every
//! disparity level and channels `C..2C` carry the reference features
//! shifted by `d` along the scanline. A stack of 3D convolutions regresses
//! `[1, C, D, H, W]` logits, a softmax over the disparity axis turns them
//! into per-channel attention, and the attended reference is the
//! attention-weighted sum of the shifted reference slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ShiftDirection, Var};
use crate::layers::{Activation, ConvLayer};
use crate::tensor::{ConvSpec, Tensor};

/// Disparity axis of cost volumes and attention maps.
pub const DISPARITY_AXIS: usize = 2;

/// How reference features are merged into the target stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    /// Softmax attention over the cost volume.
    #[default]
    Gaa,
    /// Maximum of the regressed volume over the disparity axis.
    Max,
    /// Plain channel concatenation of target and reference features.
    Concat,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Gaa => "gaa",
            AggregationMode::Max => "max",
            AggregationMode::Concat => "concat",
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaa" => Ok(Self::Gaa),
            "max" => Ok(Self::Max),
            "concat" => Ok(Self::Concat),
            other => Err(Error::invalid(format!(
                "unknown ablation mode {other:?} (expected gaa, max or concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaaConfig {
    /// Number of disparity levels `D` in the cost volume.
    pub max_disparity: usize,
    pub feature_channels: usize,
    pub conv3d_stack: Vec<ConvSpec>,
}

impl GaaConfig {
    /// Two 3x3x3 layers, `2C -> C -> C`.
    pub fn new(max_disparity: usize, feature_channels: usize) -> Self {
        let c = feature_channels;
        Self {
            max_disparity,
            feature_channels,
            conv3d_stack: vec![ConvSpec::new3d(2 * c, c, 3, 1, 1), ConvSpec::new3d(c, c, 3, 1, 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disparity == 0 {
            return Err(Error::invalid("GAA needs at least one disparity level"));
        }
        let c = self.feature_channels;
        let mut expect = 2 * c;
        for s in &self.conv3d_stack {
            s.validate()?;
            if s.kernel_dims.len() != 3 || s.stride != 1 || 2 * s.padding + 1 != s.kernel_dims[0] {
                return Err(Error::invalid(format!(
                    "conv3d stack layers must be size-preserving 3D convolutions, got {s:?}"
                )));
            }
            if s.in_channels != expect {
                return Err(Error::shape(
                    "gaa",
                    format!("conv3d stack expects {} input channels, chain provides {expect}", s.in_channels),
                ));
            }
            expect = s.out_channels;
        }
        if expect != c {
            return Err(Error::shape(
                "gaa",
                format!("conv3d stack ends with {expect} channels, need {c}"),
            ));
        }
        Ok(())
    }

    /// ELU between layers, raw logits out of the last one.
    pub fn init_stack(&self, rng: &mut impl Rng) -> Vec<ConvLayer> {
        let n = self.conv3d_stack.len();
        self.conv3d_stack
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Elu
                };
                ConvLayer::init(s.clone(), act, rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostVolume {
    /// `[1, 2C, D, H, W]`.
    pub values: Var,
    pub direction: ShiftDirection,
    pub max_disparity: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionMap {
    /// `[1, C, D, H, W]`, sums to one over the disparity axis.
    pub values: Var,
}

fn check_features(g: &Graph, target: Var, reference: Var) -> Result<usize> {
    let ts = g.shape(target);
    let rs = g.shape(reference);
    if ts != rs || ts.len() != 4 {
        return Err(Error::shape(
            "gaa",
            format!("target {ts:?} and reference {rs:?} must share a [N,C,H,W] shape"),
        ));
    }
    Ok(ts[1])
}

pub fn build_cost_volume(
    g: &mut Graph,
    target: Var,
    reference: Var,
    cfg: &GaaConfig,
    direction: ShiftDirection,
) -> Result<CostVolume> {
    let c = check_features(g, target, reference)?;
    if c != cfg.feature_channels {
        return Err(Error::shape(
            "cost_volume",
            format!("features have {c} channels, config says {}", cfg.feature_channels),
        ));
    }
    let values = g.cost_volume(target, reference, cfg.max_disparity, direction)?;
    Ok(CostVolume {
        values,
        direction,
        max_disparity: cfg.max_disparity,
        channels: c,
    })
}

/// Runs the conv3d stack over the volume: `[1, C, D, H, W]` logits.
pub fn regress_volume(g: &mut Graph, v: &CostVolume, stack: &[ConvLayer<Var>]) -> Result<Var> {
    let mut x = v.values;
    for layer in stack {
        x = layer.forward(g, x)?;
    }
    let c = g.shape(x)[1];
    if c != v.channels {
        return Err(Error::shape(
            "attention",
            format!("conv3d stack produced {c} channels, volume reference half has {}", v.channels),
        ));
    }
    Ok(x)
}

pub fn attention_from_volume(g: &mut Graph, v: &CostVolume, stack: &[ConvLayer<Var>]) -> Result<AttentionMap> {
    let logits = regress_volume(g, v, stack)?;
    let values = g.softmax(logits, DISPARITY_AXIS)?;
    #[cfg(debug_assertions)]
    {
        let err = normalization_error(g.value(values));
        debug_assert!(err <= 1e-5, "attention sums deviate from 1 by {err}");
    }
    Ok(AttentionMap { values })
}

/// Largest `|sum_d A[c,d,h,w] - 1|` of a `[N, C, D, H, W]` attention tensor.
pub fn normalization_error(a: &Tensor) -> f32 {
    let s = a.shape();
    let (outer, d, inner) = (s[0] * s[1], s[2], s[3] * s[4]);
    let data = a.data();
    let mut worst = 0.0f32;
    for o in 0..outer {
        for i in 0..inner {
            let sum: f32 = (0..d).map(|k| data[(o * d + k) * inner + i]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

/// Reference half `V_ref` of the volume.
pub fn reference_part(g: &mut Graph, v: &CostVolume) -> Result<Var> {
    g.slice(v.values, 1, v.channels, v.channels)
}

/// `sum_d A[c,d,h,w] * V_ref[c,d,h,w]`.
pub fn aggregate(g: &mut Graph, a: &AttentionMap, v: &CostVolume) -> Result<Var> {
    let v_ref = reference_part(g, v)?;
    if g.shape(a.values) != g.shape(v_ref) {
        return Err(Error::shape(
            "aggregate",
            format!("attention {:?} vs reference volume {:?}", g.shape(a.values), g.shape(v_ref)),
        ));
    }
    let prod = g.mul(a.values, v_ref)?;
    g.sum_axis(prod, DISPARITY_AXIS)
}

/// `concat(target, aggregate(attention(volume)))` along channels.
pub fn gaa_forward(
    g: &mut Graph,
    target: Var,
    reference: Var,
    cfg: &GaaConfig,
    stack: &[ConvLayer<Var>],
    direction: ShiftDirection,
) -> Result<Var> {
    let v = build_cost_volume(g, target, reference, cfg, direction)?;
    let a = attention_from_volume(g, &v, stack)?;
    let attended = aggregate(g, &a, &v)?;
    g.concat(&[target, attended], 1)
}

/// Merges reference features into the target stream according to `mode`.
/// Every mode returns `[1, 2C, H, W]`.
pub fn merge_features(
    g: &mut Graph,
    mode: AggregationMode,
    target: Var,
    reference: Var,
    cfg: &GaaConfig,
    stack: &[ConvLayer<Var>],
    direction: ShiftDirection,
) -> Result<Var> {
    match mode {
        AggregationMode::Gaa => gaa_forward(g, target, reference, cfg, stack, direction),
        AggregationMode::Max => {
            let v = build_cost_volume(g, target, reference, cfg, direction)?;
            let logits = regress_volume(g, &v, stack)?;
            let picked = g.max_axis(logits, DISPARITY_AXIS)?;
            g.concat(&[target, picked], 1)
        }
        AggregationMode::Concat => {
            check_features(g, target, reference)?;
            g.concat(&[target, reference], 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(GaaConfig::new(4, 3).validate().is_ok());
        let mut bad = GaaConfig::new(4, 3);
        bad.conv3d_stack[1].out_channels = 2;
        assert!(bad.validate().is_err());
        assert!(GaaConfig::new(0, 3).validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("max".parse::<AggregationMode>().unwrap(), AggregationMode::Max);
        assert!("mean".parse::<AggregationMode>().is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let t = g.input(Tensor::zeros(&[1, 2, 3, 4]));
        let r = g.input(Tensor::zeros(&[1, 2, 3, 5]));
        let cfg = GaaConfig::new(2, 2);
        assert!(build_cost_volume(&mut g, t, r, &cfg, ShiftDirection::RefIsRight).is_err());
    }
}
