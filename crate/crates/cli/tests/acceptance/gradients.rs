//! Finite-difference suite over every differentiable operation and the
//! conv/transposed-conv adjoint identity.

use pinet_core::rng::{prng, Prng};
use pinet_tensor::{grad_check, Activation, Axes, LossKind, ReduceKind, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SHAPES: u64 = 10;
const ADJOINT_TOL: f64 = 1e-5;

fn uniform(r: &mut Prng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn away_from_zero(r: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = r.random_range(0.01..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn spread(r: &mut Prng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn random_shape(r: &mut Prng) -> Vec<usize> {
    let rank = r.random_range(1..=4);
    (0..rank).map(|_| r.random_range(1..=4)).collect()
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).len() as f32;
    let w = uniform(&mut prng(seed ^ 0xabcd), &shape, -1.0, 1.0);
    let w = tape.constant(Tensor::new(shape, w.data().iter().map(|v| v / n.sqrt()).collect())?);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

#[derive(Default)]
pub struct Suite {
    pub checks: usize,
    pub failures: Vec<String>,
    pub worst: f64,
    pub adjoint_worst: f64,
}

impl Suite {
    fn check<F>(&mut self, name: &str, seed: u64, mut params: Vec<Tensor>, f: F)
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        self.checks += 1;
        match grad_check(f, &mut params, H, TOL, Some(64)) {
            Ok(report) => {
                self.worst = self.worst.max(report.worst());
                if !report.passed() {
                    self.failures.push(format!("{name}#{seed} ({:.2e})", report.worst()));
                }
            }
            Err(e) => self.failures.push(format!("{name}#{seed}: {e}")),
        }
    }
}

pub fn run() -> Suite {
    let mut s = Suite::default();
    for seed in 0..SHAPES {
        let r = &mut prng(seed);
        let (n, c, f) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4));
        let (k, stride, pad) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(0..=1));
        let (h, w) = (r.random_range(k.max(3)..=7), r.random_range(k.max(3)..=7));
        let p = vec![uniform(r, &[n, c, h, w], -1.0, 1.0), uniform(r, &[f, c, k, k], -1.0, 1.0), uniform(r, &[f], -1.0, 1.0)];
        s.check("conv2d", seed, p, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        });

        let k = r.random_range(2..=4);
        let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
        let p = vec![uniform(r, &[n, f, h, w], -1.0, 1.0), uniform(r, &[f, c, k, k], -1.0, 1.0), uniform(r, &[c], -1.0, 1.0)];
        s.check("conv2d_transposed", seed, p, |t, v| {
            let y = t.conv2d_transposed(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        });

        let (din, dout) = (r.random_range(1..=9), r.random_range(1..=6));
        let p = vec![uniform(r, &[n, din], -1.0, 1.0), uniform(r, &[dout, din], -1.0, 1.0), uniform(r, &[dout], -1.0, 1.0)];
        s.check("affine", seed, p, |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        });

        let shape = random_shape(r);
        s.check("relu", seed, vec![away_from_zero(r, &shape)], |t, v| {
            let y = t.activation(v[0], Activation::Relu)?;
            project(t, y, seed)
        });
        s.check("sigmoid", seed, vec![uniform(r, &shape, -4.0, 4.0)], |t, v| {
            let y = t.activation(v[0], Activation::Sigmoid)?;
            project(t, y, seed)
        });
        let sm = [r.random_range(1..=2), r.random_range(2..=4), r.random_range(1..=4), r.random_range(1..=4)];
        s.check("softmax", seed, vec![uniform(r, &sm, -3.0, 3.0)], |t, v| {
            let y = t.activation(v[0], Activation::SoftmaxOverChannels)?;
            project(t, y, seed)
        });

        let axes: Vec<usize> = (0..shape.len()).filter(|_| r.random::<bool>()).collect();
        let axes = if axes.is_empty() { Axes::All } else { Axes::List(axes) };
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
            let axes = axes.clone();
            s.check(&format!("{kind:?}"), seed, vec![spread(r, &shape)], move |t, v| {
                let y = t.reduce(v[0], kind, axes.clone())?;
                project(t, y, seed)
            });
        }

        let flat = vec![shape.iter().product::<usize>()];
        let p = vec![
            uniform(r, &shape, -1.0, 1.0),
            uniform(r, &shape, -1.0, 1.0),
            uniform(r, &[1], 0.5, 1.5),
            uniform(r, &[1], -1.0, 1.0),
        ];
        s.check("arithmetic", seed, p, |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[1])?;
            let d = t.sub(m, v[0])?;
            let sc = t.scale_by(d, v[2])?;
            let sh = t.shift_by(sc, v[3])?;
            let sq = t.square(sh);
            let y = t.reshape(sq, &flat)?;
            project(t, y, seed)
        });

        let labels = Tensor::from_fn(&shape, |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let l = labels.clone();
        s.check("bce_with_logits", seed, vec![uniform(r, &shape, -4.0, 4.0)], move |t, v| {
            let y = t.constant(l.clone());
            t.loss(v[0], y, LossKind::BceWithLogits)
        });
        s.check("bce", seed, vec![uniform(r, &shape, 0.05, 0.95)], |t, v| {
            let y = t.constant(labels.clone());
            t.loss(v[0], y, LossKind::Bce)
        });
        let target = uniform(r, &shape, -1.0, 1.0);
        let offsets = away_from_zero(r, &shape);
        let pred = Tensor::new(shape.clone(), target.data().iter().zip(offsets.data()).map(|(a, b)| a + b).collect()).unwrap();
        s.check("l1", seed, vec![pred.clone(), target.clone()], |t, v| t.loss(v[0], v[1], LossKind::L1));
        s.check("l2", seed, vec![pred, target], |t, v| t.loss(v[0], v[1], LossKind::L2));
        let (b, k, h, w) = (r.random_range(1..=2), r.random_range(2..=4), r.random_range(1..=4), r.random_range(1..=4));
        let classes = Tensor::from_fn(&[b, h, w], |_| r.random_range(0..k) as f32);
        s.check("pixel_cross_entropy", seed, vec![uniform(r, &[b, k, h, w], -2.0, 2.0)], |t, v| {
            let p = t.activation(v[0], Activation::SoftmaxOverChannels)?;
            let y = t.constant(classes.clone());
            t.loss(p, y, LossKind::PixelCrossEntropy)
        });
    }

    for seed in 0..50u64 {
        let r = &mut prng(1000 + seed);
        let (n, c, f) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = r.random_range(1..5);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2).min((k - 1) / 2);
        let h = (r.random_range(1..5) - 1) * stride + k - 2 * pad;
        let a = uniform(r, &[n, c, h, h], -1.0, 1.0);
        let kernel = uniform(r, &[f, c, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let (av, kv) = (tape.leaf(&a), tape.leaf(&kernel));
        let fwd = tape.conv2d(av, kv, None, stride, pad).unwrap();
        let b = uniform(r, tape.shape(fwd), -1.0, 1.0);
        let bv = tape.leaf(&b);
        let back = tape.conv2d_transposed(bv, kv, None, stride, pad).unwrap();
        let inner = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>();
        let lhs = inner(tape.value(fwd), b.data());
        let rhs = inner(a.data(), tape.value(back));
        let err = (lhs - rhs).abs() / lhs.abs().max(1.0);
        s.adjoint_worst = s.adjoint_worst.max(err);
        if err > ADJOINT_TOL {
            s.failures.push(format!("adjoint#{seed} ({err:.2e})"));
        }
    }
    s
}
