//! Generator branches and the patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaa::{self, AggregationMode, GaaConfig};
use crate::graph::{Graph, ShiftDirection, Var};
use crate::layers::{Activation, ConvLayer, GatedConvLayer, SpectralNormState};
use crate::mask::BinaryMask;
use crate::tensor::{ConvSpec, Tensor};

/// Default adversarial weight in the total loss.
pub const DEFAULT_LAMBDA_ADV: f32 = 0.01;
/// Default number of cross-guidance iterations.
pub const DEFAULT_ITERATIONS: usize = 6;
/// Smallest image side the discriminator accepts.
pub const DISC_MIN_SIDE: usize = 8;
const LEAKY_SLOPE: f32 = 0.2;
const OUTPUT_FEATURE_BIAS: f32 = 0.5;
/// sigmoid(2) is about 0.88, so fresh branches start out confident.
const OUTPUT_GATE_BIAS: f32 = 2.0;

/// Layer widths and GAA settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Widths of the two stride-2 encoder stages; the second is the GAA
    /// feature width `C`.
    pub encoder_channels: [usize; 2],
    /// Widths of the decoder stages at 1/4 and 1/2 scale.
    pub decoder_channels: [usize; 2],
    pub fullres_channels: usize,
    pub disparity_levels: usize,
    pub mode: AggregationMode,
    pub disc_channels: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [8, 16],
            decoder_channels: [16, 8],
            fullres_channels: 8,
            disparity_levels: 8,
            mode: AggregationMode::Gaa,
            disc_channels: [16, 32, 32],
        }
    }
}

impl NetConfig {
    /// Small widths for gradient checks and unit tests.
    pub fn tiny(disparity_levels: usize) -> Self {
        Self {
            encoder_channels: [3, 4],
            decoder_channels: [4, 3],
            fullres_channels: 3,
            disparity_levels,
            mode: AggregationMode::Gaa,
            disc_channels: [4, 4, 4],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[1]
    }

    pub fn gaa_config(&self) -> GaaConfig {
        GaaConfig::new(self.disparity_levels, self.feature_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.disc_channels)
            .chain(std::iter::once(&self.fullres_channels));
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        self.gaa_config().validate()
    }
}

/// Learnable weights of both generator branches and the GAA stack.
#[derive(Debug, Clone)]
pub struct Generator<P = Tensor> {
    pub encoder: Vec<GatedConvLayer<P>>,
    pub gaa: Vec<ConvLayer<P>>,
    pub decoder: Vec<GatedConvLayer<P>>,
    pub fullres: Vec<GatedConvLayer<P>>,
    pub gaa_config: GaaConfig,
    pub mode: AggregationMode,
}

impl<P> Generator<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> Generator<Q> {
        Generator {
            encoder: map_layers(&self.encoder, "encoder", f),
            gaa: self
                .gaa
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("gaa.{i}"), f))
                .collect(),
            decoder: map_layers(&self.decoder, "decoder", f),
            fullres: map_layers(&self.fullres, "fullres", f),
            gaa_config: self.gaa_config.clone(),
            mode: self.mode,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &P)) {
        let _ = self.map(&mut |n, p| f(n, p));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        for (n, p) in self.params_mut() {
            f(&n, p);
        }
    }

    /// Named parameter slots in visiting order.
    pub fn params(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.extend(l.params(&format!("encoder.{i}")));
        }
        for (i, l) in self.gaa.iter().enumerate() {
            out.extend(l.params(&format!("gaa.{i}")));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.extend(l.params(&format!("decoder.{i}")));
        }
        for (i, l) in self.fullres.iter().enumerate() {
            out.extend(l.params(&format!("fullres.{i}")));
        }
        out
    }

    /// Named mutable parameter slots, in the same order as `params`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            out.extend(l.params_mut(&format!("encoder.{i}")));
        }
        for (i, l) in self.gaa.iter_mut().enumerate() {
            out.extend(l.params_mut(&format!("gaa.{i}")));
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            out.extend(l.params_mut(&format!("decoder.{i}")));
        }
        for (i, l) in self.fullres.iter_mut().enumerate() {
            out.extend(l.params_mut(&format!("fullres.{i}")));
        }
        out
    }
}

fn map_layers<P, Q>(
    layers: &[GatedConvLayer<P>],
    prefix: &str,
    f: &mut impl FnMut(&str, &P) -> Q,
) -> Vec<GatedConvLayer<Q>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.map(&format!("{prefix}.{i}"), f))
        .collect()
}

/// Output layer: identity features, biases set so predictions start near
/// mid-gray with confident gates.
fn output_layer(spec: ConvSpec, rng: &mut ChaCha8Rng) -> GatedConvLayer {
    let mut l = GatedConvLayer::init(spec, Activation::Identity, rng);
    l.feature_bias = Tensor::full(&[3], OUTPUT_FEATURE_BIAS);
    l.gate_bias = Tensor::full(&[3], OUTPUT_GATE_BIAS);
    l
}

impl Generator<Tensor> {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let [e1, c] = cfg.encoder_channels;
        let [d1, d2] = cfg.decoder_channels;
        let f = cfg.fullres_channels;
        let elu = Activation::Elu;
        let encoder = vec![
            GatedConvLayer::init(ConvSpec::new2d(4, e1, 3, 2, 1), elu, rng),
            GatedConvLayer::init(ConvSpec::new2d(e1, c, 3, 2, 1), elu, rng),
        ];
        let gaa_config = cfg.gaa_config();
        let gaa = match cfg.mode {
            AggregationMode::Concat => Vec::new(),
            _ => gaa_config.init_stack(rng),
        };
        let decoder = vec![
            GatedConvLayer::init(ConvSpec::new2d(2 * c, d1, 3, 1, 1), elu, rng),
            GatedConvLayer::init(ConvSpec::new2d(d1, d2, 3, 1, 1), elu, rng),
            output_layer(ConvSpec::new2d(d2, 3, 3, 1, 1), rng),
        ];
        let fullres = vec![
            GatedConvLayer::init(ConvSpec::new2d(4, f, 3, 1, 1), elu, rng),
            GatedConvLayer::init(ConvSpec::new2d(f, f, 3, 1, 1), elu, rng),
            GatedConvLayer::init(ConvSpec::new2d(f, f, 3, 1, 1), elu, rng),
            output_layer(ConvSpec::new2d(f, 3, 3, 1, 1), rng),
        ];
        Ok(Self {
            encoder,
            gaa,
            decoder,
            fullres,
            gaa_config,
            mode: cfg.mode,
        })
    }

    /// Binds every weight as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Generator<Var> {
        self.map(&mut |_, t| g.param(t.clone()))
    }

    /// Binds every weight as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Generator<Var> {
        self.map(&mut |_, t| g.input(t.clone()))
    }
}

/// Restored image and soft mask of one branch, both `[1, 3, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub restored: Var,
    pub soft_mask: Var,
}

/// Zero-fills holes and appends the mask channel: `[1, 4, H, W]`.
fn masked_input(g: &mut Graph, image: Var, mask: &BinaryMask) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 || s[2] != mask.height() || s[3] != mask.width() {
        return Err(Error::shape(
            "masked_input",
            format!("image {s:?} with mask {}x{}", mask.height(), mask.width()),
        ));
    }
    let m3 = g.input(mask.expand(3));
    let m1 = g.input(mask.expand(1));
    let holes_zeroed = g.mul(image, m3)?;
    g.concat(&[holes_zeroed, m1], 1)
}

fn run_gated(g: &mut Graph, layers: &[GatedConvLayer<Var>], mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, x)?.features;
    }
    Ok(x)
}

fn finish_branch(g: &mut Graph, last: &GatedConvLayer<Var>, x: Var) -> Result<BranchOutput> {
    let out = last.forward(g, x)?;
    let restored = g.clamp(out.features, 0.0, 1.0);
    Ok(BranchOutput {
        restored,
        soft_mask: out.soft_gate,
    })
}

impl Generator<Var> {
    /// `[1,3,H,W]` image and mask to `[1,C,H/4,W/4]` features.
    pub fn encode(&self, g: &mut Graph, image: Var, mask: &BinaryMask) -> Result<Var> {
        let (h, w) = (mask.height(), mask.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "encoder",
                format!("image sides must be divisible by 4, got {h}x{w}"),
            ));
        }
        let x = masked_input(g, image, mask)?;
        run_gated(g, &self.encoder, x)
    }

    /// Encoder-decoder branch with reference guidance at 1/4 scale.
    pub fn encoder_decoder(
        &self,
        g: &mut Graph,
        target: Var,
        target_mask: &BinaryMask,
        reference: Var,
        reference_mask: &BinaryMask,
        direction: ShiftDirection,
    ) -> Result<BranchOutput> {
        if g.shape(target) != g.shape(reference) {
            return Err(Error::shape(
                "encoder_decoder",
                format!("target {:?} vs reference {:?}", g.shape(target), g.shape(reference)),
            ));
        }
        let phi_tar = self.encode(g, target, target_mask)?;
        let phi_ref = self.encode(g, reference, reference_mask)?;
        let merged = gaa::merge_features(
            g,
            self.mode,
            phi_tar,
            phi_ref,
            &self.gaa_config,
            &self.gaa,
            direction,
        )?;
        let (last, hidden) = self.decoder.split_last().expect("decoder has layers");
        let mut x = merged;
        for l in hidden {
            x = l.forward(g, x)?.features;
            x = g.up2(x)?;
        }
        finish_branch(g, last, x)
    }

    /// Four full-resolution gated convolutions on the target alone.
    pub fn fullres(&self, g: &mut Graph, target: Var, target_mask: &BinaryMask) -> Result<BranchOutput> {
        let x = masked_input(g, target, target_mask)?;
        let (last, hidden) = self.fullres.split_last().expect("fullres has layers");
        let x = run_gated(g, hidden, x)?;
        finish_branch(g, last, x)
    }
}

/// Sum of the two branch predictions.
pub fn fuse_branches(g: &mut Graph, a: &BranchOutput, b: &BranchOutput) -> Result<Var> {
    g.add(a.restored, b.restored)
}

/// Power-iteration vectors for one discriminator layer.
#[derive(Debug, Clone)]
pub struct SnVectors {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

/// Patch discriminator of stride-2 spectrally normalized convolutions.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<ConvLayer>,
    pub norms: Vec<SpectralNormState>,
}

/// Discriminator weights inside a graph.
pub struct BoundDiscriminator {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    effective: Vec<Var>,
    specs: Vec<ConvSpec>,
}

impl Discriminator {
    pub fn init(channels: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let widths = [3, channels[0], channels[1], channels[2], 1];
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            let spec = ConvSpec::new2d(widths[i], widths[i + 1], 3, 2, 1);
            norms.push(SpectralNormState::new(widths[i + 1], 1, rng));
            layers.push(ConvLayer::init(spec, Activation::Identity, rng));
        }
        Self { layers, norms }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("disc.{i}"), f);
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            let _ = l.map(&format!("disc.{i}"), &mut |n, t| f(n, t));
        }
    }

    /// One power-iteration update per layer; call once per training step.
    pub fn power_step(&mut self) -> Result<Vec<SnVectors>> {
        self.layers
            .iter()
            .zip(self.norms.iter_mut())
            .map(|(l, st)| {
                let (u, v, _, _) = st.step(&l.weight)?;
                Ok(SnVectors { u, v })
            })
            .collect()
    }

    /// Effective (normalized) weights under the current `u` estimates,
    /// refined by `iterations` extra power-iteration steps on a copy.
    pub fn effective_weights(&self, iterations: usize) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(&self.norms)
            .map(|(l, st)| {
                let mut st = st.clone();
                st.power_iterations = iterations;
                Ok(st.normalize(&l.weight)?.weight)
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, vectors: &[SnVectors], trainable: bool) -> Result<BoundDiscriminator> {
        self.bind_with(g, vectors, &mut |g, _, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        })
    }

    /// Like [`bind`](Self::bind), with `leaf(graph, name, tensor)` creating
    /// each weight and bias node.
    pub fn bind_with(
        &self,
        g: &mut Graph,
        vectors: &[SnVectors],
        leaf: &mut impl FnMut(&mut Graph, &str, &Tensor) -> Var,
    ) -> Result<BoundDiscriminator> {
        if vectors.len() != self.layers.len() {
            return Err(Error::invalid("one set of power-iteration vectors per layer required"));
        }
        let mut out = BoundDiscriminator {
            weights: Vec::new(),
            biases: Vec::new(),
            effective: Vec::new(),
            specs: Vec::new(),
        };
        for (i, (l, sv)) in self.layers.iter().zip(vectors).enumerate() {
            let w = leaf(g, &format!("disc.{i}.weight"), &l.weight);
            let b = leaf(g, &format!("disc.{i}.bias"), &l.bias);
            let eff = g.spectral_norm(w, &sv.u, &sv.v)?;
            out.weights.push(w);
            out.biases.push(b);
            out.effective.push(eff);
            out.specs.push(l.spec.clone());
        }
        Ok(out)
    }
}

impl BoundDiscriminator {
    /// `[1,3,H,W]` image to `[1,1,h,w]` patch scores in (0,1).
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] < DISC_MIN_SIDE || s[3] < DISC_MIN_SIDE {
            return Err(Error::shape(
                "discriminator",
                format!("needs [1,3,H,W] with H,W >= {DISC_MIN_SIDE}, got {s:?}"),
            ));
        }
        let mut x = image;
        let n = self.specs.len();
        for i in 0..n {
            x = g.conv(x, self.effective[i], self.biases[i], &self.specs[i])?;
            if i + 1 < n {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(g.sigmoid(x))
    }
}

/// Everything a training run learns, plus the loss configuration.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub lambda_adv: f32,
    pub iterations: usize,
}

impl ModelParams {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::init(&config, &mut rng)?;
        let discriminator = Discriminator::init(config.disc_channels, &mut rng);
        Ok(Self {
            config,
            generator,
            discriminator,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            iterations: DEFAULT_ITERATIONS,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.generator.visit(&mut |_, t| n += t.len());
        self.discriminator.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Adds the leading batch axis: `[3,H,W]` to `[1,3,H,W]`.
pub fn batched(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("image", format!("expected [C,H,W], got {s:?}")));
    }
    image.reshape(&[1, s[0], s[1], s[2]])
}

/// Drops the leading batch axis.
pub fn unbatched(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("image", format!("expected [1,C,H,W], got {s:?}")));
    }
    t.reshape(&s[1..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_counts_match_architecture() {
        let p = ModelParams::init(NetConfig::default(), 0).unwrap();
        assert_eq!(p.generator.fullres.len(), 4);
        assert_eq!(p.generator.encoder.len(), 2);
        assert_eq!(p.generator.decoder.last().unwrap().spec.out_channels, 3);
        assert_eq!(p.generator.fullres.last().unwrap().spec.out_channels, 3);
        assert_eq!(p.generator.fullres.last().unwrap().activation, Activation::Identity);
        assert_eq!(p.lambda_adv, 0.01);
        assert_eq!(p.iterations, 6);
    }

    #[test]
    fn concat_mode_has_no_gaa_stack() {
        let cfg = NetConfig {
            mode: AggregationMode::Concat,
            ..NetConfig::tiny(2)
        };
        let p = ModelParams::init(cfg, 0).unwrap();
        assert!(p.generator.gaa.is_empty());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(NetConfig::tiny(2), 3).unwrap();
        let b = ModelParams::init(NetConfig::tiny(2), 3).unwrap();
        let (mut va, mut vb) = (Vec::new(), Vec::new());
        a.generator.visit(&mut |_, t| va.push(t.clone()));
        b.generator.visit(&mut |_, t| vb.push(t.clone()));
        assert_eq!(va, vb);
    }
}
