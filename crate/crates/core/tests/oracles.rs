//! Naive references for the convolution kernels, the volume pipeline and
//! the stereo generator.

mod common;

use common::{naive_conv, random};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereopaint::data::{Layer, Scene, Texture};
use stereopaint::{ConvSpec, Graph, Tensor};

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_matches_direct_loops_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for h in [1, 3, 6] {
        for w in [2, 5, 6] {
            for (ci, co) in [(1, 1), (3, 5), (6, 2)] {
                for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (5, 1, 2)] {
                    if h + 2 * pad < k || w + 2 * pad < k {
                        continue;
                    }
                    let spec = ConvSpec::new2d(ci, co, k, stride, pad);
                    let x = random(&mut r, &[1, ci, h, w]);
                    let wt = random(&mut r, &spec.weight_shape());
                    let b = random(&mut r, &[co]);
                    assert_eq!(run_conv(&x, &wt, &b, &spec), naive_conv(&x, &wt, &b, &spec), "{spec:?} {h}x{w}");
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 100);
}

#[test]
fn conv3d_matches_direct_loops_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for (d, h, w) in [(1, 1, 1), (2, 3, 4), (6, 5, 6), (4, 6, 2)] {
        for (ci, co) in [(1, 2), (4, 3), (6, 6)] {
            for (k, pad) in [(1, 0), (3, 1)] {
                let spec = ConvSpec::new3d(ci, co, k, 1, pad);
                let x = random(&mut r, &[1, ci, d, h, w]);
                let wt = random(&mut r, &spec.weight_shape());
                let b = random(&mut r, &[co]);
                assert_eq!(run_conv(&x, &wt, &b, &spec), naive_conv(&x, &wt, &b, &spec), "{spec:?}");
            }
        }
    }
}

#[test]
fn volume_pipeline_matches_nested_loops() {
    let (checked, worst) = common::check_volume_grid().unwrap();
    assert_eq!(checked, 5 * 5 * 3 * 4 * 2);
    assert!(worst <= common::ORACLE_TOLERANCE, "{worst}");
}

#[test]
fn one_hot_attention_recovers_shifted_features_exactly() {
    assert!(common::check_warping_recovery().unwrap() > 0);
}

#[test]
fn constant_disparity_scene_is_an_exact_shift() {
    let (h, w) = (16, 32);
    for d in 0..=8usize {
        let tex = Texture::flat([0.2, 0.5, 0.7]);
        let mut textured = tex.clone();
        textured.amp = [0.2, 0.1, 0.15];
        textured.freq = [(0.3, 0.7), (0.9, 0.2)];
        let scene = Scene {
            layers: vec![Layer {
                top: 0,
                left: 0,
                height: h as i64,
                width: (w + 8) as i64,
                disparity: d,
                texture: textured,
            }],
        };
        let p = scene.render(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in d..w {
                    assert_eq!(p.left.at(&[c, y, x]), p.right.at(&[c, y, x - d]), "d={d}");
                }
            }
        }
        assert!(p.disparity.data().iter().all(|&v| v == d as f32));
    }
}

fn top_layer(scene: &Scene, y: i64, x: i64) -> Option<usize> {
    scene.layers.iter().rposition(|l| covers(l, y, x))
}

#[test]
fn random_scenes_satisfy_correspondence_where_the_same_surface_is_visible() {
    let (h, w, max_disp) = (32usize, 32usize, 8usize);
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let scene = Scene::random(&mut r, h, w, max_disp);
        let p = scene.render(h, w);
        let mut matched = 0;
        for y in 0..h {
            for x in 0..w {
                let Some(k) = top_layer(&scene, y as i64, x as i64) else { continue };
                let d = scene.layers[k].disparity;
                assert_eq!(p.disparity.at(&[0, y, x]), d as f32);
                if x < d {
                    continue;
                }
                // The right pixel shows layer k when no nearer layer covers it.
                let xr = x - d;
                let right_top = scene
                    .layers
                    .iter()
                    .rposition(|l| covers(l, y as i64, xr as i64 + l.disparity as i64));
                if right_top != Some(k) {
                    continue;
                }
                for c in 0..3 {
                    assert_eq!(p.left.at(&[c, y, x]), p.right.at(&[c, y, xr]));
                }
                matched += 1;
            }
        }
        assert!(matched > h * w / 2, "seed {seed}: only {matched} matched pixels");
    }
}

fn covers(l: &Layer, y: i64, x: i64) -> bool {
    y >= l.top && y < l.top + l.height && x >= l.left && x < l.left + l.width
}
