//! Finite-difference checks for every differentiable operation, ten random
//! shapes each, plus the conv/transposed-conv adjoint identity.

mod common;

use common::{rng, uniform};
use pinet_tensor::{grad_check, Activation, Axes, LossKind, ReduceKind, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_pcg::Pcg32;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SHAPES: u64 = 10;

/// Contracts `y` against a fixed random weight so the root is a scalar with
/// a non-trivial upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).len() as f32;
    let mut r = rng(seed ^ 0xabcd);
    let w = uniform(&mut r, &shape, -1.0, 1.0);
    let w = Tensor::new(shape, w.data().iter().map(|v| v / n.sqrt()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn assert_passes<F>(name: &str, seed: u64, params: &mut [Tensor], f: F)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, params, H, TOL, Some(64)).unwrap();
    assert!(report.passed(), "{name} (seed {seed}): {:?}", report.max_rel_error);
}

/// Values in [-1, 1] kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(r: &mut Pcg32, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = r.random_range(gap..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn dims(r: &mut Pcg32, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(seed);
        let (n, c, f) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 4));
        let k = dims(&mut r, 1, 3);
        let stride = dims(&mut r, 1, 2);
        let pad = dims(&mut r, 0, 1);
        let h = dims(&mut r, k.max(3), 7);
        let w = dims(&mut r, k.max(3), 7);
        let mut params = vec![
            uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
            uniform(&mut r, &[f, c, k, k], -1.0, 1.0),
            uniform(&mut r, &[f], -1.0, 1.0),
        ];
        assert_passes("conv2d", seed, &mut params, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn conv2d_transposed_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(100 + seed);
        let (n, c, f) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 4));
        let k = dims(&mut r, 2, 4);
        let stride = dims(&mut r, 1, 2);
        let pad = dims(&mut r, 0, 1);
        let h = dims(&mut r, 2, 5);
        let w = dims(&mut r, 2, 5);
        let mut params = vec![
            uniform(&mut r, &[n, f, h, w], -1.0, 1.0),
            uniform(&mut r, &[f, c, k, k], -1.0, 1.0),
            uniform(&mut r, &[c], -1.0, 1.0),
        ];
        assert_passes("conv2d_transposed", seed, &mut params, |t, v| {
            let y = t.conv2d_transposed(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn affine_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(200 + seed);
        let (n, din, dout) = (dims(&mut r, 1, 5), dims(&mut r, 1, 9), dims(&mut r, 1, 6));
        let mut params = vec![
            uniform(&mut r, &[n, din], -1.0, 1.0),
            uniform(&mut r, &[dout, din], -1.0, 1.0),
            uniform(&mut r, &[dout], -1.0, 1.0),
        ];
        assert_passes("affine", seed, &mut params, |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        });
    }
}

fn random_shape(r: &mut Pcg32) -> Vec<usize> {
    let rank = dims(r, 1, 4);
    (0..rank).map(|_| dims(r, 1, 4)).collect()
}

#[test]
fn elementwise_activation_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(300 + seed);
        let shape = random_shape(&mut r);
        let mut params = vec![away_from_zero(&mut r, &shape, 0.01)];
        assert_passes("relu", seed, &mut params, |t, v| {
            let y = t.activation(v[0], Activation::Relu)?;
            project(t, y, seed)
        });
        let mut params = vec![uniform(&mut r, &shape, -4.0, 4.0)];
        assert_passes("sigmoid", seed, &mut params, |t, v| {
            let y = t.activation(v[0], Activation::Sigmoid)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(400 + seed);
        let shape = [dims(&mut r, 1, 2), dims(&mut r, 2, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
        let mut params = vec![uniform(&mut r, &shape, -3.0, 3.0)];
        assert_passes("softmax", seed, &mut params, |t, v| {
            let y = t.activation(v[0], Activation::SoftmaxOverChannels)?;
            project(t, y, seed)
        });
    }
}

/// Distinct values spaced well apart so max never flips under perturbation.
fn spread(r: &mut Pcg32, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

#[test]
fn reduce_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(500 + seed);
        let shape = random_shape(&mut r);
        let axes: Vec<usize> = (0..shape.len()).filter(|_| r.random::<bool>()).collect();
        let axes = if axes.is_empty() { Axes::All } else { Axes::List(axes) };
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
            let mut params = vec![spread(&mut r, &shape)];
            let axes = axes.clone();
            assert_passes(&format!("{kind:?}"), seed, &mut params, move |t, v| {
                let y = t.reduce(v[0], kind, axes.clone())?;
                project(t, y, seed)
            });
        }
    }
}

#[test]
fn arithmetic_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(600 + seed);
        let shape = random_shape(&mut r);
        let new_shape = vec![shape.iter().product::<usize>()];
        let mut params = vec![
            uniform(&mut r, &shape, -1.0, 1.0),
            uniform(&mut r, &shape, -1.0, 1.0),
            uniform(&mut r, &[1], 0.5, 1.5),
            uniform(&mut r, &[1], -1.0, 1.0),
        ];
        assert_passes("arithmetic", seed, &mut params, |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[1])?;
            let s = t.sub(m, v[0])?;
            let sc = t.scale_by(s, v[2])?;
            let sh = t.shift_by(sc, v[3])?;
            let sq = t.square(sh);
            let flat = t.reshape(sq, &new_shape)?;
            project(t, flat, seed)
        });
    }
}

#[test]
fn loss_gradients() {
    for seed in 0..SHAPES {
        let mut r = rng(700 + seed);
        let shape = random_shape(&mut r);
        let n: usize = shape.iter().product();
        let labels = Tensor::from_fn(&shape, |_| if r.random::<bool>() { 1.0 } else { 0.0 });

        let mut params = vec![uniform(&mut r, &shape, -4.0, 4.0)];
        assert_passes("bce_with_logits", seed, &mut params, |t, v| {
            let y = t.constant(labels.clone());
            t.loss(v[0], y, LossKind::BceWithLogits)
        });
        let mut params = vec![uniform(&mut r, &shape, 0.05, 0.95)];
        assert_passes("bce", seed, &mut params, |t, v| {
            let y = t.constant(labels.clone());
            t.loss(v[0], y, LossKind::Bce)
        });
        let target = uniform(&mut r, &shape, -1.0, 1.0);
        let offsets = away_from_zero(&mut r, &shape, 0.01);
        let pred = Tensor::new(shape.clone(), target.data().iter().zip(offsets.data()).map(|(a, b)| a + b).collect()).unwrap();
        let mut params = vec![pred.clone(), target.clone()];
        assert_passes("l1", seed, &mut params, |t, v| t.loss(v[0], v[1], LossKind::L1));
        let mut params = vec![pred, target];
        assert_passes("l2", seed, &mut params, |t, v| t.loss(v[0], v[1], LossKind::L2));

        let (b, k, h, w) = (dims(&mut r, 1, 2), dims(&mut r, 2, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let classes = Tensor::from_fn(&[b, h, w], |_| r.random_range(0..k) as f32);
        let logits = uniform(&mut r, &[b, k, h, w], -2.0, 2.0);
        let mut params = vec![logits];
        assert_passes("pixel_cross_entropy", seed, &mut params, |t, v| {
            let p = t.activation(v[0], Activation::SoftmaxOverChannels)?;
            let y = t.constant(classes.clone());
            t.loss(p, y, LossKind::PixelCrossEntropy)
        });
        assert!(n > 0);
    }
}

#[test]
fn linear_model_is_exact() {
    let mut r = rng(800);
    let x = uniform(&mut r, &[6, 4], -1.0, 1.0);
    let mut params = vec![uniform(&mut r, &[1, 4], -1.0, 1.0), uniform(&mut r, &[1], -1.0, 1.0)];
    let report = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.affine(xv, v[0], Some(v[1]))?;
            t.sum_all(y)
        },
        &mut params,
        // Central differences are exact for a linear map at any step; a unit
        // step keeps f32 rounding of the loss out of the quotient.
        1.0,
        TOL,
        None,
    )
    .unwrap();
    assert!(report.worst() < 1e-6, "{report:?}");
}

fn cube(x: f32) -> f32 {
    x * x * x
}

fn wrong_cube_derivative(x: f32) -> f32 {
    x * x
}

fn right_cube_derivative(x: f32) -> f32 {
    3.0 * x * x
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let mut r = rng(801);
    let mut params = vec![uniform(&mut r, &[8], 0.5, 1.5)];
    let good = grad_check(
        |t, v| {
            let y = t.map(v[0], cube, right_cube_derivative);
            t.sum_all(y)
        },
        &mut params,
        H,
        TOL,
        None,
    )
    .unwrap();
    assert!(good.passed());
    let bad = grad_check(
        |t, v| {
            let y = t.map(v[0], cube, wrong_cube_derivative);
            t.sum_all(y)
        },
        &mut params,
        H,
        TOL,
        None,
    )
    .unwrap();
    assert!(!bad.passed());
    assert!(bad.worst() > TOL);
}

#[test]
fn non_finite_forward_is_reported() {
    let mut params = vec![Tensor::full(&[2], f32::INFINITY)];
    let out = grad_check(|t, v| t.sum_all(v[0]), &mut params, H, TOL, None);
    assert!(out.is_err());
}

fn inner(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_and_transposed_are_adjoint(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, f in 1usize..4,
        k in 1usize..5, stride in 1usize..3, pad in 0usize..2, steps in 1usize..5,
    ) {
        // Pick an input extent that the transposed op maps back exactly.
        prop_assume!(k > pad);
        let h = (steps - 1) * stride + k - 2 * pad.min((k - 1) / 2);
        let pad = pad.min((k - 1) / 2);
        prop_assume!(h >= 1);
        let mut r = rng(seed);
        let a = uniform(&mut r, &[n, c, h, h], -1.0, 1.0);
        let kernel = uniform(&mut r, &[f, c, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let (av, kv) = (tape.leaf(&a), tape.leaf(&kernel));
        let fwd = tape.conv2d(av, kv, None, stride, pad).unwrap();
        let out_shape = tape.shape(fwd).to_vec();
        let b = uniform(&mut r, &out_shape, -1.0, 1.0);
        let bv = tape.leaf(&b);
        let back = tape.conv2d_transposed(bv, kv, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(back), a.shape());
        let lhs = inner(tape.value(fwd), b.data());
        let rhs = inner(a.data(), tape.value(back));
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn softmax_channel_sums_are_one(seed in any::<u64>(), k in 1usize..6, hw in 1usize..6, scale in 0.1f32..50.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, k, hw, hw], -scale, scale);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let p = tape.activation(v, Activation::SoftmaxOverChannels).unwrap();
        let vals = tape.value(p);
        for q in 0..hw * hw {
            let s: f64 = (0..k).map(|c| vals[c * hw * hw + q] as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_matches_with_logits_on_sigmoid(seed in any::<u64>(), len in 1usize..20) {
        let mut r = rng(seed);
        let z = uniform(&mut r, &[len], -6.0, 6.0);
        let y = Tensor::from_fn(&[len], |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let (zv, yv) = (tape.leaf(&z), tape.leaf(&y));
        let p = tape.sigmoid(zv);
        let a = tape.loss(p, yv, LossKind::Bce).unwrap();
        let b = tape.loss(zv, yv, LossKind::BceWithLogits).unwrap();
        prop_assert!((tape.value(a)[0] - tape.value(b)[0]).abs() < 1e-4);
    }
}

#[test]
fn probes_straddling_a_kink_are_skipped_not_scored() {
    // relu at 5e-4 with h = 1e-3: the central difference sees 3/4 of the
    // slope while the upper one-sided slope is exact.
    let mut params = vec![Tensor::new(vec![1], vec![5e-4]).unwrap()];
    let report = grad_check(
        |tape, vars| {
            let y = tape.activation(vars[0], Activation::Relu)?;
            tape.sum_all(y)
        },
        &mut params,
        H,
        TOL,
        None,
    )
    .unwrap();
    assert_eq!((report.kinks, report.probes), (1, 1));
    assert!(!report.passed());

    // A smooth function has no kinks and passes.
    let mut params = vec![Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap()];
    let report = grad_check(
        |tape, vars| {
            let y = tape.activation(vars[0], Activation::Sigmoid)?;
            tape.sum_all(y)
        },
        &mut params,
        H,
        TOL,
        None,
    )
    .unwrap();
    assert_eq!(report.kinks, 0);
    assert!(report.passed());
}
