//! Nested-loop references shared by the oracle and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereopaint::gaa::{self, AttentionMap, GaaConfig};
use stereopaint::layers::{Activation, ConvLayer};
use stereopaint::{ConvSpec, Graph, ShiftDirection, Tensor};

pub fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0f32..1.0))
}

/// Direct convolution of `[1, Ci, *spatial]` with `[Co, Ci, *kernel]`,
/// accumulating from the bias over (ci, kernel offsets) in order.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let nd = spec.kernel_dims.len();
    let ins: Vec<usize> = xs[2..].to_vec();
    let outs: Vec<usize> = (0..nd)
        .map(|i| (ins[i] + 2 * spec.padding - spec.kernel_dims[i]) / spec.stride + 1)
        .collect();
    // Pad to three spatial axes.
    let pad3 = |v: &[usize]| -> [usize; 3] {
        let mut a = [1; 3];
        a[3 - v.len()..].copy_from_slice(v);
        a
    };
    let (i3, o3, k3) = (pad3(&ins), pad3(&outs), pad3(&spec.kernel_dims));
    let p3 = {
        let mut p = [0usize; 3];
        for a in 3 - nd..3 {
            p[a] = spec.padding;
        }
        p
    };
    let s3 = {
        let mut s = [1usize; 3];
        for a in 3 - nd..3 {
            s[a] = spec.stride;
        }
        s
    };
    let (ci, co) = (spec.in_channels, spec.out_channels);
    let mut shape = vec![1, co];
    shape.extend(&outs);
    let mut out = Tensor::zeros(&shape);
    let mut idx = 0;
    for o in 0..co {
        for z in 0..o3[0] {
            for y in 0..o3[1] {
                for xo in 0..o3[2] {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for a in 0..k3[0] {
                            for bb in 0..k3[1] {
                                for e in 0..k3[2] {
                                    let iz = (z * s3[0] + a) as isize - p3[0] as isize;
                                    let iy = (y * s3[1] + bb) as isize - p3[1] as isize;
                                    let ix = (xo * s3[2] + e) as isize - p3[2] as isize;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= i3[0] || iy >= i3[1] || ix >= i3[2] {
                                        continue;
                                    }
                                    let xv = x.data()[((c * i3[0] + iz) * i3[1] + iy) * i3[2] + ix];
                                    let wv = w.data()[(((o * ci + c) * k3[0] + a) * k3[1] + bb) * k3[2] + e];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    out.data_mut()[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

/// `V[c, d, y, x]`: target features in the first half, reference features
/// at the matching position in the second half (zero outside the image).
pub fn naive_cost_volume(t: &Tensor, rf: &Tensor, levels: usize, dir: ShiftDirection) -> Tensor {
    let [_, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let mut v = Tensor::zeros(&[1, 2 * c, levels, h, w]);
    for ch in 0..c {
        for d in 0..levels {
            for y in 0..h {
                for x in 0..w {
                    v.set(&[0, ch, d, y, x], t.at(&[0, ch, y, x]));
                    // Left pixel x matches right pixel x - d.
                    let src = match dir {
                        ShiftDirection::RefIsRight => x as isize - d as isize,
                        ShiftDirection::RefIsLeft => x as isize + d as isize,
                    };
                    if src >= 0 && (src as usize) < w {
                        v.set(&[0, c + ch, d, y, x], rf.at(&[0, ch, y, src as usize]));
                    }
                }
            }
        }
    }
    v
}

fn elu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn naive_attention(volume: &Tensor, stack: &[ConvLayer]) -> Tensor {
    let mut x = volume.clone();
    for l in stack {
        x = naive_conv(&x, &l.weight, &l.bias, &l.spec);
        if l.activation == Activation::Elu {
            x = x.map(elu);
        }
    }
    let s = x.shape().to_vec();
    let (c, dl, h, w) = (s[1], s[2], s[3], s[4]);
    let mut a = x.clone();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let m = (0..dl).map(|d| x.at(&[0, ch, d, y, xx])).fold(f32::NEG_INFINITY, f32::max);
                let z: f64 = (0..dl).map(|d| ((x.at(&[0, ch, d, y, xx]) - m) as f64).exp()).sum();
                for d in 0..dl {
                    let e = ((x.at(&[0, ch, d, y, xx]) - m) as f64).exp();
                    a.set(&[0, ch, d, y, xx], (e / z) as f32);
                }
            }
        }
    }
    a
}

pub fn naive_aggregate(a: &Tensor, volume: &Tensor) -> Tensor {
    let s = a.shape();
    let (c, dl, h, w) = (s[1], s[2], s[3], s[4]);
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        (0..dl)
            .map(|d| a.at(&[0, ch, d, y, x]) as f64 * volume.at(&[0, c + ch, d, y, x]) as f64)
            .sum::<f64>() as f32
    })
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Right-view features and a left view shifted by a constant disparity.
pub fn shifted_pair(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize, d: usize) -> (Tensor, Tensor) {
    let right = random(r, &[1, c, h, w]);
    let left = Tensor::from_fn(&[1, c, h, w], |i| {
        let x = i % w;
        if x >= d {
            right.data()[i - d]
        } else {
            r.gen_range(-1.0f32..1.0)
        }
    });
    (left, right)
}

pub fn one_hot(c: usize, levels: usize, h: usize, w: usize, at: usize) -> Tensor {
    Tensor::from_fn(&[1, c, levels, h, w], |i| if (i / (h * w)) % levels == at { 1.0 } else { 0.0 })
}


/// Shape grid for the volume, attention and aggregation oracles: every
/// axis at most 6, both shift directions, five seeds.
pub const GRID_HW: [(usize, usize); 5] = [(1, 1), (2, 5), (4, 6), (6, 3), (6, 6)];
pub const GRID_C: [usize; 3] = [1, 3, 6];
pub const GRID_D: [usize; 4] = [1, 2, 4, 6];
pub const ORACLE_TOLERANCE: f32 = 1e-5;

/// Runs the grid and returns the number of cases and the worst deviation of
/// attention and aggregation. The cost volume itself must match exactly.
pub fn check_volume_grid() -> Result<(usize, f32), String> {
    let mut checked = 0;
    let mut worst = 0.0f32;
    for seed in 0..5u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        for &(h, w) in &GRID_HW {
            for c in GRID_C {
                for dl in GRID_D {
                    let cfg = GaaConfig::new(dl, c);
                    let stack = cfg.init_stack(&mut r);
                    let t = random(&mut r, &[1, c, h, w]);
                    let rf = random(&mut r, &[1, c, h, w]);
                    for dir in [ShiftDirection::RefIsRight, ShiftDirection::RefIsLeft] {
                        let mut g = Graph::new();
                        let (tv, rv) = (g.input(t.clone()), g.input(rf.clone()));
                        let vol = gaa::build_cost_volume(&mut g, tv, rv, &cfg, dir).map_err(|e| e.to_string())?;
                        let bound: Vec<_> = stack.iter().map(|l| l.map("", &mut |_, p| g.input(p.clone()))).collect();
                        let att = gaa::attention_from_volume(&mut g, &vol, &bound).map_err(|e| e.to_string())?;
                        let agg = gaa::aggregate(&mut g, &att, &vol).map_err(|e| e.to_string())?;

                        let v_ref = naive_cost_volume(&t, &rf, dl, dir);
                        if g.value(vol.values) != &v_ref {
                            return Err(format!("cost volume differs at {h}x{w} c{c} d{dl} {dir:?} seed {seed}"));
                        }
                        let a_ref = naive_attention(&v_ref, &stack);
                        let e_att = max_diff(g.value(att.values), &a_ref);
                        let e_agg = max_diff(g.value(agg), &naive_aggregate(&a_ref, &v_ref));
                        worst = worst.max(e_att).max(e_agg);
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok((checked, worst))
}

/// One-hot attention at `d*` over a pair related by constant disparity
/// `d*`, in both roles. Returns the number of interior values compared;
/// any bit difference is an error.
pub fn check_warping_recovery() -> Result<usize, String> {
    let (c, h, w, levels) = (3, 4, 12, 8);
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let cfg = GaaConfig::new(levels, c);
    let mut compared = 0;
    for d_star in 0..levels {
        let (left, right) = shifted_pair(&mut r, c, h, w, d_star);
        for (target, reference, dir) in [
            (&left, &right, ShiftDirection::RefIsRight),
            (&right, &left, ShiftDirection::RefIsLeft),
        ] {
            let mut g = Graph::new();
            let (tv, rv) = (g.input(target.clone()), g.input(reference.clone()));
            let vol = gaa::build_cost_volume(&mut g, tv, rv, &cfg, dir).map_err(|e| e.to_string())?;
            let att = AttentionMap {
                values: g.input(one_hot(c, levels, h, w, d_star)),
            };
            let out = gaa::aggregate(&mut g, &att, &vol).map_err(|e| e.to_string())?;
            let out = g.value(out);
            let interior = match dir {
                ShiftDirection::RefIsRight => d_star..w,
                ShiftDirection::RefIsLeft => 0..w - d_star,
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in interior.clone() {
                        let (a, b) = (out.at(&[0, ch, y, x]), target.at(&[0, ch, y, x]));
                        if a.to_bits() != b.to_bits() {
                            return Err(format!("d*={d_star} {dir:?} at ({ch},{y},{x}): {a} vs {b}"));
                        }
                        compared += 1;
                    }
                }
            }
        }
    }
    Ok(compared)
}
