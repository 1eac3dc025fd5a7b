use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereopaint::data::{self, MaskBucket, MaskSpec};
use stereopaint::gaa::{self, GaaConfig};
use stereopaint::icg::combine_confidence;
use stereopaint::losses;
use stereopaint::metrics::{psnr, ssim};
use stereopaint::network::{fuse_branches, BranchOutput, Discriminator, ModelParams, NetConfig, SnVectors};
use stereopaint::{pnm, BinaryMask, ConvSpec, Graph, ShiftDirection, Tensor};

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(0.6))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn tiny_model(seed: u64) -> ModelParams {
    ModelParams::init(NetConfig::tiny(3), seed).unwrap()
}

fn shape4() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=5, 1usize..=6, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts((c, d, h, w, seed) in shape4(), shift in -20.0f32..20.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut r, &[1, c, d, h, w], -8.0, 8.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let s = g.softmax(xv, 2).unwrap();
        let xs = g.input(x.map(|v| v + shift));
        let s2 = g.softmax(xs, 2).unwrap();
        prop_assert!(gaa::normalization_error(g.value(s)) <= 1e-5);
        prop_assert!(g.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(max_diff(g.value(s), g.value(s2)) <= 1e-6);
    }

    #[test]
    fn double_shift_restores_the_interior(w in 1usize..12, h in 1usize..4, off in -6isize..=6, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut r, &[1, 2, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let a = g.shift_horizontal(xv, off);
        let b = g.shift_horizontal(a, -off);
        let y = g.value(b);
        let m = off.unsigned_abs();
        for c in 0..2 {
            for yy in 0..h {
                for xx in 0..w {
                    let v = y.at(&[0, c, yy, xx]);
                    let interior = if off >= 0 { xx + m < w } else { xx >= m };
                    if interior {
                        prop_assert_eq!(v, x.at(&[0, c, yy, xx]));
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn up_down_round_trip_on_block_constant_images(h in 1usize..5, w in 1usize..5, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let small = random(&mut r, &[1, 2, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let s = g.input(small.clone());
        let up = g.up2(s).unwrap();
        let down = g.down2(up).unwrap();
        prop_assert_eq!(g.value(down), &small);
    }

    #[test]
    fn cost_volume_halves_follow_the_shift_contract((c, d, h, w, seed) in shape4(), right in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut r, &[1, c, h, w], -1.0, 1.0);
        let rf = random(&mut r, &[1, c, h, w], -1.0, 1.0);
        let dir = if right { ShiftDirection::RefIsRight } else { ShiftDirection::RefIsLeft };
        let mut g = Graph::new();
        let (tv, rv) = (g.input(t.clone()), g.input(rf.clone()));
        let v = gaa::build_cost_volume(&mut g, tv, rv, &GaaConfig::new(d, c), dir).unwrap();
        let v = g.value(v.values);
        for k in 0..d {
            let shifted = stereopaint::graph::shift_last_axis(&rf, dir.sign() * k as isize, 0.0);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(v.at(&[0, ch, k, y, x]), t.at(&[0, ch, y, x]));
                        prop_assert_eq!(v.at(&[0, c + ch, k, y, x]), shifted.at(&[0, ch, y, x]));
                        if k >= w {
                            prop_assert_eq!(v.at(&[0, c + ch, k, y, x]), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn attention_is_a_distribution_for_any_parameters((c, d, h, w, seed) in shape4(), gain in 0.1f32..20.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GaaConfig::new(d, c);
        let stack: Vec<_> = cfg
            .init_stack(&mut r)
            .into_iter()
            .map(|mut l| {
                l.weight = l.weight.map(|v| v * gain);
                l
            })
            .collect();
        let t = random(&mut r, &[1, c, h, w], -2.0, 2.0);
        let rf = random(&mut r, &[1, c, h, w], -2.0, 2.0);
        let mut g = Graph::new();
        let (tv, rv) = (g.input(t), g.input(rf));
        let v = gaa::build_cost_volume(&mut g, tv, rv, &cfg, ShiftDirection::RefIsRight).unwrap();
        let bound: Vec<_> = stack.iter().map(|l| l.map("", &mut |_, p| g.input(p.clone()))).collect();
        let a = gaa::attention_from_volume(&mut g, &v, &bound).unwrap();
        let a = g.value(a.values);
        prop_assert!(gaa::normalization_error(a) <= 1e-5);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_stack_gives_the_mean_of_shifted_references((c, d, h, w, seed) in shape4()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GaaConfig::new(d, c);
        let mut stack = cfg.init_stack(&mut r);
        for l in &mut stack {
            l.weight = l.weight.map(|_| 0.0);
        }
        let t = random(&mut r, &[1, c, h, w], -1.0, 1.0);
        let rf = random(&mut r, &[1, c, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let (tv, rv) = (g.input(t.clone()), g.input(rf.clone()));
        let bound: Vec<_> = stack.iter().map(|l| l.map("", &mut |_, p| g.input(p.clone()))).collect();
        let out = gaa::gaa_forward(&mut g, tv, rv, &cfg, &bound, ShiftDirection::RefIsRight).unwrap();
        let out = g.value(out);
        let mut mean = Tensor::zeros(&[1, c, h, w]);
        for k in 0..d {
            mean.add_assign(&stereopaint::graph::shift_last_axis(&rf, k as isize, 0.0));
        }
        let mean = mean.map(|v| v / d as f32);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(out.at(&[0, ch, y, x]), t.at(&[0, ch, y, x]));
                    prop_assert!((out.at(&[0, c + ch, y, x]) - mean.at(&[0, ch, y, x])).abs() <= 1e-6);
                }
            }
        }
        if d == 1 {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(out.at(&[0, c + ch, y, x]), rf.at(&[0, ch, y, x]));
                    }
                }
            }
        }
    }

    #[test]
    fn conv_with_zero_weight_is_constant_bias(ci in 1usize..4, co in 1usize..4, h in 1usize..6, w in 1usize..6, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::new2d(ci, co, 3, 1, 1);
        let b = random(&mut r, &[co], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.input(random(&mut r, &[1, ci, h, w], -1.0, 1.0));
        let wv = g.input(Tensor::zeros(&spec.weight_shape()));
        let bv = g.input(b.clone());
        let y = g.conv2d(x, wv, bv, &spec).unwrap();
        let y = g.value(y);
        for o in 0..co {
            for i in 0..h * w {
                prop_assert_eq!(y.data()[o * h * w + i], b.data()[o]);
            }
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(h in 11usize..20, w in 11usize..20, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut r, &[3, h, w], 0.0, 1.0);
        let b = random(&mut r, &[3, h, w], 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-6);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn masks_land_in_their_bucket(seed: u64, b in 0usize..3, h in 16usize..=28, w in 16usize..=28) {
        let bucket = MaskBucket::ALL[b];
        let (h, w) = (h * 2, w * 2);
        let spec = MaskSpec::new(bucket, seed);
        let m = data::gen_irregular_mask(&spec, h, w).unwrap();
        let ratio = data::mask_ratio(&m);
        prop_assert!(bucket.contains(ratio), "{bucket} ratio {ratio}");
        let zeros = m.tensor().data().iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(ratio, zeros as f64 / (h * w) as f64);
        prop_assert!(m.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(data::gen_irregular_mask(&spec, h, w).unwrap(), m);
    }

    #[test]
    fn samples_are_deterministic_and_masked_by_construction(seed in 0u64..1000, index in 0u64..1000, b in 0usize..3) {
        let bucket = MaskBucket::ALL[b];
        let s = data::make_sample(seed, index, 32, 32, 8, bucket).unwrap();
        prop_assert_eq!(&data::make_sample(seed, index, 32, 32, 8, bucket).unwrap(), &s);
        prop_assert_ne!(&data::make_sample(seed, index + 1, 32, 32, 8, bucket).unwrap().y_left, &s.y_left);
        prop_assert_eq!(&s.x_left, &data::apply_mask(&s.y_left, &s.m_left).unwrap());
        prop_assert_eq!(&s.x_right, &data::apply_mask(&s.y_right, &s.m_right).unwrap());
        prop_assert!(bucket.contains(data::mask_ratio(&s.m_left)));
        prop_assert!(bucket.contains(data::mask_ratio(&s.m_right)));
    }

    #[test]
    fn ppm_and_pgm_round_trip(h in 1usize..9, w in 1usize..9, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = random(&mut r, &[3, h, w], 0.0, 1.0);
        let back = pnm::decode_ppm(&pnm::encode_ppm(&img).unwrap()).unwrap();
        prop_assert!(max_diff(&img, &back) <= 0.5 / 255.0 + 1e-6);
        let again = pnm::decode_ppm(&pnm::encode_ppm(&back).unwrap()).unwrap();
        prop_assert_eq!(&again, &back);
        let m = random_mask(&mut r, h, w);
        prop_assert_eq!(pnm::decode_mask(&pnm::encode_mask(&m)).unwrap(), m);
    }

    #[test]
    fn confidence_combination_is_an_and(h in 1usize..6, w in 1usize..6, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut r, h, w);
        let b = random_mask(&mut r, h, w);
        let ab = combine_confidence(&a, &b).unwrap();
        prop_assert_eq!(&ab, &combine_confidence(&b, &a).unwrap());
        prop_assert_eq!(&combine_confidence(&a, &BinaryMask::ones(h, w)).unwrap(), &a);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(ab.is_known(y, x), a.is_known(y, x) && b.is_known(y, x));
            }
        }
    }

    #[test]
    fn rec_loss_is_non_negative(seed: u64, k in 1usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut img = |g: &mut Graph| g.input(random(&mut r, &[1, 3, 4, 4], 0.0, 1.0));
        let left: Vec<_> = (0..k).map(|_| img(&mut g)).collect();
        let right: Vec<_> = (0..k).map(|_| img(&mut g)).collect();
        let (yl, yr) = (img(&mut g), img(&mut g));
        let l = losses::rec_loss(&mut g, &left, &right, yl, yr).unwrap();
        prop_assert!(g.value(l).data()[0] >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn branch_outputs_respect_their_ranges(seed: u64, mseed: u64) {
        let p = tiny_model(seed);
        let mut r = ChaCha8Rng::seed_from_u64(mseed);
        let mut g = Graph::new();
        let gen = p.generator.bind(&mut g);
        let x = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let y = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let (ma, mb) = (random_mask(&mut r, 8, 8), random_mask(&mut r, 8, 8));
        let f = gen.fullres(&mut g, x, &ma).unwrap();
        let e = gen.encoder_decoder(&mut g, x, &ma, y, &mb, ShiftDirection::RefIsRight).unwrap();
        for b in [f, e] {
            prop_assert_eq!(g.shape(b.restored), &[1, 3, 8, 8]);
            prop_assert!(g.value(b.restored).data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(g.value(b.soft_mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let phi = gen.encode(&mut g, x, &ma).unwrap();
        prop_assert_eq!(&g.shape(phi)[2..], &[2, 2]);
    }

    #[test]
    fn fusion_is_a_commutative_sum(seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut out = |g: &mut Graph| BranchOutput {
            restored: g.input(random(&mut r, &[1, 3, 4, 4], 0.0, 1.0)),
            soft_mask: g.input(random(&mut r, &[1, 3, 4, 4], 0.0, 1.0)),
        };
        let (a, b) = (out(&mut g), out(&mut g));
        let zero = BranchOutput {
            restored: g.input(Tensor::zeros(&[1, 3, 4, 4])),
            soft_mask: a.soft_mask,
        };
        let ab = fuse_branches(&mut g, &a, &b).unwrap();
        let ba = fuse_branches(&mut g, &b, &a).unwrap();
        let a0 = fuse_branches(&mut g, &a, &zero).unwrap();
        let aa = fuse_branches(&mut g, &a, &a).unwrap();
        prop_assert_eq!(g.value(ab), g.value(ba));
        prop_assert_eq!(g.value(a0), g.value(a.restored));
        prop_assert_eq!(g.value(aa), &g.value(a.restored).map(|v| 2.0 * v));
    }

    #[test]
    fn discriminator_scores_are_probabilities(seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Discriminator::init([4, 4, 4], &mut r);
        let vecs: Vec<SnVectors> = d.power_step().unwrap();
        let img = random(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
        let score = |d: &Discriminator| {
            let mut g = Graph::new();
            let bd = d.bind(&mut g, &vecs, false).unwrap();
            let x = g.input(img.clone());
            let s = bd.forward(&mut g, x).unwrap();
            g.value(s).clone()
        };
        let s = score(&d);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(score(&d), s);
    }
}

#[test]
fn mask_conditioning_changes_encoder_features() {
    for seed in 0..5 {
        let p = tiny_model(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 50);
        let mut g = Graph::new();
        let gen = p.generator.bind(&mut g);
        let x = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let a = gen.encode(&mut g, x, &BinaryMask::ones(8, 8)).unwrap();
        let b = gen.encode(&mut g, x, &BinaryMask::zeros(8, 8)).unwrap();
        assert_ne!(g.value(a), g.value(b));
    }
}

#[test]
fn reference_information_reaches_the_output_under_uniform_attention() {
    for seed in 0..5 {
        let mut p = tiny_model(seed);
        for l in &mut p.generator.gaa {
            l.weight = l.weight.map(|_| 0.0);
            l.bias = l.bias.map(|_| 0.0);
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed + 70);
        let mut g = Graph::new();
        let gen = p.generator.bind(&mut g);
        let m = BinaryMask::ones(8, 8);
        let x = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let y1 = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let y2 = g.input(random(&mut r, &[1, 3, 8, 8], 0.0, 1.0));
        let a = gen.encoder_decoder(&mut g, x, &m, y1, &m, ShiftDirection::RefIsRight).unwrap();
        let b = gen.encoder_decoder(&mut g, x, &m, y2, &m, ShiftDirection::RefIsRight).unwrap();
        assert_ne!(g.value(a.restored), g.value(b.restored));
    }
}

#[test]
fn independent_view_masks_differ_for_nearly_every_sample() {
    let differ = (0..100u64)
        .filter(|&i| {
            let (l, r) = data::sample_masks(0, i, 32, 32, MaskBucket::B20_40).unwrap();
            l != r
        })
        .count();
    assert!(differ >= 95, "{differ}/100");
}

#[test]
fn adversarial_terms_at_an_uninformed_discriminator() {
    // Zero weights and biases make every score exactly 0.5.
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut d = Discriminator::init([4, 4, 4], &mut r);
    for l in &mut d.layers {
        l.weight = l.weight.map(|_| 0.0);
        l.bias = l.bias.map(|_| 0.0);
    }
    let vecs: Vec<SnVectors> = d
        .layers
        .iter()
        .map(|l| SnVectors {
            u: vec![1.0; l.spec.out_channels],
            v: vec![0.0; l.spec.fan_in()],
        })
        .collect();
    let mut g = Graph::new();
    let bd = d.bind(&mut g, &vecs, false).unwrap();
    let x = g.input(random(&mut r, &[1, 3, 16, 16], 0.0, 1.0));
    let y = g.input(random(&mut r, &[1, 3, 16, 16], 0.0, 1.0));
    let disc = losses::adv_disc_value(&mut g, &bd, &[x], &[x], y, y).unwrap();
    let gen = losses::adv_gen_loss(&mut g, &bd, &[x], &[x]).unwrap();
    let ln_half = 0.5f32.ln();
    assert!((g.value(disc).data()[0] - 4.0 * ln_half).abs() < 1e-5);
    assert!((g.value(gen).data()[0] + 2.0 * ln_half).abs() < 1e-5);
}
