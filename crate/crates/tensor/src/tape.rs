//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! bookkeeping to run the vector-Jacobian product later. Nodes can only refer
//! to earlier nodes, so the recording order is already topological and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax across axis 1 of an `[N, K, H, W]` tensor, per pixel.
    SoftmaxOverChannels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    List(Vec<usize>),
}

impl From<&[usize]> for Axes {
    fn from(a: &[usize]) -> Self {
        Axes::List(a.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Numerically stable binary cross-entropy on raw logits.
    BceWithLogits,
    /// Binary cross-entropy on probabilities, clamped to `[1e-7, 1 - 1e-7]`.
    Bce,
    L1,
    L2,
    /// Prediction `[N, K, H, W]` probabilities, target `[N, H, W]` class indices.
    PixelCrossEntropy,
}

pub const PROB_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        n: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        n: usize,
        geom: ConvGeom,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        n: usize,
        k: usize,
        plane: usize,
    },
    Map {
        input: Var,
        derivative: fn(f32) -> f32,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul {
        input: Var,
        scalar: Var,
    },
    ScalarAdd {
        input: Var,
        scalar: Var,
    },
    Square(Var),
    Reshape(Var),
    Reduce {
        input: Var,
        kind: ReduceKind,
        /// Output slot of every input element (sum/mean) or the winning input
        /// index of every output slot (max).
        index: Vec<usize>,
        count: usize,
    },
    Loss {
        kind: LossKind,
        pred: Var,
        target: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        flush(e / (1.0 + e))
    }
}

/// Subnormals carry no useful signal here and make every later multiply
/// an order of magnitude slower.
#[inline]
fn flush(v: f32) -> f32 {
    if v.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (k <= padded && stride > 0).then(|| (padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; it participates in differentiation iff the tensor
    /// is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f32> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(TensorError::Usage(format!(
                "expected a scalar node, found {} elements",
                other.len()
            ))),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Folds the gradient of `v` into `target.grad`. Unreached nodes leave
    /// the target untouched.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn rank4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [a, b, c, d] => Ok([a, b, c, d]),
            ref s => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    fn check_bias(&self, bias: Option<Var>, expected: usize, op: &'static str) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [expected] {
                return Err(TensorError::dim(
                    op,
                    "bias",
                    format!("expected [{expected}], got {:?}", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|&v| self.requires_grad(v))
    }

    /// Cross-correlation of `[N,C,H,W]` input with a `[F,C,k,k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.rank4(input, OP)?;
        let [f, kc, kh, kw] = self.rank4(kernel, OP)?;
        if kc != c {
            return Err(TensorError::dim(OP, "channels (input axis 1, kernel axis 1)", format!("{c} vs {kc}")));
        }
        if kh != kw {
            return Err(TensorError::dim(OP, "kernel axes 2,3", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be positive".into()));
        }
        self.check_bias(bias, f, OP)?;
        let oh = conv_out(h, kh, stride, padding)
            .ok_or_else(|| TensorError::dim(OP, "height (axis 2)", format!("kernel {kh} exceeds padded extent {}", h + 2 * padding)))?;
        let ow = conv_out(w, kw, stride, padding)
            .ok_or_else(|| TensorError::dim(OP, "width (axis 3)", format!("kernel {kw} exceeds padded extent {}", w + 2 * padding)))?;
        let geom = ConvGeom {
            c_in: c,
            h,
            w,
            c_out: f,
            k: kh,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let value = kernels::conv_forward(n, &geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        let rg = self.any_grad(&[Some(input), Some(kernel), bias]);
        Ok(self.push(
            vec![n, f, oh, ow],
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                n,
                geom,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`]: `[N,F,H,W]` input, `[F,C,k,k]` kernel,
    /// output `[N,C,(H-1)*stride-2*padding+k, ...]`.
    pub fn conv2d_transposed(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d_transposed";
        let [n, f, h, w] = self.rank4(input, OP)?;
        let [kf, c, kh, kw] = self.rank4(kernel, OP)?;
        if kf != f {
            return Err(TensorError::dim(OP, "channels (input axis 1, kernel axis 0)", format!("{f} vs {kf}")));
        }
        if kh != kw {
            return Err(TensorError::dim(OP, "kernel axes 2,3", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 || h == 0 || w == 0 {
            return Err(TensorError::Usage("conv2d_transposed needs positive stride and extents".into()));
        }
        self.check_bias(bias, c, OP)?;
        let out_h = ((h - 1) * stride + kh).checked_sub(2 * padding).filter(|&v| v > 0);
        let out_w = ((w - 1) * stride + kw).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (out_h, out_w) else {
            return Err(TensorError::dim(OP, "axes 2,3", "padding removes the whole output"));
        };
        let geom = ConvGeom {
            c_in: c,
            h: oh,
            w: ow,
            c_out: f,
            k: kh,
            stride,
            pad: padding,
            oh: h,
            ow: w,
        };
        // The output size formula is the inverse of conv2d's only when the
        // stride divides evenly; guard against silently inconsistent geometry.
        if conv_out(oh, kh, stride, padding) != Some(h) || conv_out(ow, kw, stride, padding) != Some(w) {
            return Err(TensorError::dim(OP, "axes 2,3", "geometry is not invertible"));
        }
        let value = kernels::conv_t_forward(n, &geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        let rg = self.any_grad(&[Some(input), Some(kernel), bias]);
        Ok(self.push(
            vec![n, c, oh, ow],
            value,
            rg,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                n,
                geom,
            },
        ))
    }

    /// `input[N,D_in] * weight[D_out,D_in]^T + bias[D_out]`
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "affine";
        let (n, d_in) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let (d_out, wd) = match *self.shape(weight) {
            [o, d] => (o, d),
            ref s => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        if wd != d_in {
            return Err(TensorError::dim(OP, "inner (input axis 1, weight axis 1)", format!("{d_in} vs {wd}")));
        }
        self.check_bias(bias, d_out, OP)?;
        let mut value = vec![0.0; n * d_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            value.chunks_mut(d_out).for_each(|row| row.copy_from_slice(bv));
        }
        kernels::gemm_nt(n, d_in, d_out, self.value(input), self.value(weight), &mut value);
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            vec![n, d_out],
            value,
            rg,
            Op::Affine {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        match kind {
            Activation::Relu => {
                let value = self.value(input).iter().map(|&v| v.max(0.0)).collect();
                Ok(self.push(shape, value, rg, Op::Relu(input)))
            }
            Activation::Sigmoid => {
                let value = self.value(input).iter().map(|&v| sigmoid(v)).collect();
                Ok(self.push(shape, value, rg, Op::Sigmoid(input)))
            }
            Activation::SoftmaxOverChannels => {
                let [n, k, h, w] = self.rank4(input, "softmax_over_channels")?;
                let plane = h * w;
                let x = self.value(input);
                let mut value = vec![0.0; x.len()];
                for b in 0..n {
                    let base = b * k * plane;
                    for p in 0..plane {
                        let at = |c: usize| base + c * plane + p;
                        let m = (0..k).map(|c| x[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                        let mut sum = 0.0f64;
                        for c in 0..k {
                            let e = ((x[at(c)] - m) as f64).exp();
                            value[at(c)] = e as f32;
                            sum += e;
                        }
                        for c in 0..k {
                            value[at(c)] = (value[at(c)] as f64 / sum) as f32;
                        }
                    }
                }
                Ok(self.push(shape, value, rg, Op::Softmax { input, n, k, plane }))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu).expect("relu accepts any shape")
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid).expect("sigmoid accepts any shape")
    }

    /// Elementwise `f` with a caller-supplied derivative `df` (evaluated at
    /// the input value).
    pub fn map(&mut self, input: Var, f: fn(f32) -> f32, df: fn(f32) -> f32) -> Var {
        let shape = self.shape(input).to_vec();
        let value = self.value(input).iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(input);
        self.push(shape, value, rg, Op::Map { input, derivative: df })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, "all", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(f32, f32) -> f32, make: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn single(&self, s: Var, op: &'static str) -> Result<f32> {
        match self.value(s) {
            [x] => Ok(*x),
            _ => Err(TensorError::dim(op, "scalar operand", format!("expected one element, got shape {:?}", self.shape(s)))),
        }
    }

    /// Multiplies every element of `input` by the one-element node `scalar`.
    pub fn scale_by(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.single(scalar, "scale_by")?;
        let value = self.value(input).iter().map(|&v| v * s).collect();
        let rg = self.requires_grad(input) || self.requires_grad(scalar);
        Ok(self.push(self.shape(input).to_vec(), value, rg, Op::ScalarMul { input, scalar }))
    }

    /// Adds the one-element node `scalar` to every element of `input`.
    pub fn shift_by(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.single(scalar, "shift_by")?;
        let value = self.value(input).iter().map(|&v| v + s).collect();
        let rg = self.requires_grad(input) || self.requires_grad(scalar);
        Ok(self.push(self.shape(input).to_vec(), value, rg, Op::ScalarAdd { input, scalar }))
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.value(input).iter().map(|&v| v * v).collect();
        let rg = self.requires_grad(input);
        self.push(self.shape(input).to_vec(), value, rg, Op::Square(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(input).len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: self.value(input).len(),
            });
        }
        let value = self.value(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(input)))
    }

    /// Sum, mean or max over the given axes; reduced axes are dropped from
    /// the output shape. Accumulation runs in `f64`.
    pub fn reduce(&mut self, input: Var, kind: ReduceKind, axes: Axes) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let x = self.value(input);
        if x.is_empty() {
            return Err(TensorError::Domain {
                op: "reduce",
                detail: "empty tensor".into(),
            });
        }
        let reduced: Vec<bool> = match &axes {
            Axes::All => vec![true; shape.len()],
            Axes::List(list) => {
                let mut mask = vec![false; shape.len()];
                for &a in list {
                    if a >= shape.len() || mask[a] {
                        return Err(TensorError::Usage(format!(
                            "reduce: axis {a} is invalid or repeated for shape {shape:?}"
                        )));
                    }
                    mask[a] = true;
                }
                mask
            }
        };
        let out_shape: Vec<usize> = shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_len = numel(&out_shape);
        let count = x.len() / out_len;

        // Map each input element to its output slot by walking a mixed-radix
        // counter over the input shape.
        let mut slot_of = Vec::with_capacity(x.len());
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for ax in (0..shape.len()).rev() {
            if !reduced[ax] {
                out_strides[ax] = acc;
                acc *= shape[ax];
            }
        }
        let mut coord = vec![0usize; shape.len()];
        let mut slot = 0usize;
        for _ in 0..x.len() {
            slot_of.push(slot);
            for ax in (0..shape.len()).rev() {
                coord[ax] += 1;
                slot += out_strides[ax];
                if coord[ax] < shape[ax] {
                    break;
                }
                slot -= out_strides[ax] * coord[ax];
                coord[ax] = 0;
            }
        }

        let (value, index) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut sums = vec![0.0f64; out_len];
                for (&v, &s) in x.iter().zip(&slot_of) {
                    sums[s] += v as f64;
                }
                let div = if kind == ReduceKind::Mean { count as f64 } else { 1.0 };
                (sums.into_iter().map(|s| (s / div) as f32).collect(), slot_of)
            }
            ReduceKind::Max => {
                let mut best = vec![f32::NEG_INFINITY; out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, (&v, &s)) in x.iter().zip(&slot_of).enumerate() {
                    if arg[s] == usize::MAX || v > best[s] {
                        best[s] = v;
                        arg[s] = i;
                    }
                }
                (best, arg)
            }
        };
        let rg = self.requires_grad(input);
        Ok(self.push(out_shape, value, rg, Op::Reduce { input, kind, index, count }))
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, Axes::All)
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, Axes::All)
    }

    /// Mean-reduced scalar loss.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        let value = match kind {
            LossKind::PixelCrossEntropy => {
                const OP: &str = "pixel_cross_entropy";
                let [n, k, h, w] = self.rank4(pred, OP)?;
                if self.shape(target) != [n, h, w] {
                    return Err(TensorError::dim(OP, "target", format!("expected {:?}, got {:?}", [n, h, w], self.shape(target))));
                }
                if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(TensorError::Domain {
                        op: OP,
                        detail: format!("probability {bad} outside [0, 1]"),
                    });
                }
                let plane = h * w;
                let mut total = 0.0f64;
                for b in 0..n {
                    for q in 0..plane {
                        let cls = t[b * plane + q];
                        if cls < 0.0 || cls as usize >= k || cls.fract() != 0.0 {
                            return Err(TensorError::Domain {
                                op: OP,
                                detail: format!("class index {cls} not in 0..{k}"),
                            });
                        }
                        let prob = p[(b * k + cls as usize) * plane + q] as f64;
                        total -= prob.max(PROB_EPS).ln();
                    }
                }
                total / (n * plane) as f64
            }
            _ => {
                self.same_shape(pred, target, "loss")?;
                let n = p.len() as f64;
                let sum: f64 = p
                    .iter()
                    .zip(t)
                    .map(|(&x, &y)| {
                        let (x, y) = (x as f64, y as f64);
                        match kind {
                            LossKind::BceWithLogits => x.max(0.0) - x * y + (-x.abs()).exp().ln_1p(),
                            LossKind::Bce => {
                                let q = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                            }
                            LossKind::L1 => (x - y).abs(),
                            LossKind::L2 => (x - y) * (x - y),
                            LossKind::PixelCrossEntropy => unreachable!(),
                        }
                    })
                    .sum();
                sum / n
            }
        };
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(vec![], vec![value as f32], rg, Op::Loss { kind, pred, target }))
    }

    /// Reverse sweep from a scalar root. Gradients of every node reachable
    /// from `root` are retained and can be read with [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.grads[i] = Some(g);
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian product of node `i` against its upstream gradient.
    fn vjp(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                n,
                geom,
            } => {
                let want = (self.wants(input), self.wants(kernel), bias.is_some_and(|b| self.wants(b)));
                let grads = kernels::conv_backward(n, &geom, self.value(input), self.value(kernel), g, want);
                push_conv_grads(&mut out, input, kernel, bias, grads);
            }
            &Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                n,
                geom,
            } => {
                let want = (self.wants(input), self.wants(kernel), bias.is_some_and(|b| self.wants(b)));
                let grads = kernels::conv_t_backward(n, &geom, self.value(input), self.value(kernel), g, want);
                push_conv_grads(&mut out, input, kernel, bias, grads);
            }
            &Op::Affine {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            } => {
                if self.wants(input) {
                    let mut dx = vec![0.0; n * d_in];
                    kernels::gemm_nn(n, d_out, d_in, g, self.value(weight), &mut dx);
                    out.push((input, dx));
                }
                if self.wants(weight) {
                    let mut dw = vec![0.0; d_out * d_in];
                    kernels::gemm_tn(d_out, n, d_in, g, self.value(input), &mut dw);
                    out.push((weight, dw));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0f64; d_out];
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v as f64);
                    }
                    out.push((b, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            &Op::Relu(x) => {
                let dx = self.value(x).iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                let dx = node.value.iter().zip(g).map(|(&y, &d)| flush(d * y * (1.0 - y))).collect();
                out.push((x, dx));
            }
            &Op::Softmax { input, n, k, plane } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    let base = b * k * plane;
                    for p in 0..plane {
                        let at = |c: usize| base + c * plane + p;
                        let s: f64 = (0..k).map(|c| y[at(c)] as f64 * g[at(c)] as f64).sum();
                        for c in 0..k {
                            dx[at(c)] = (y[at(c)] as f64 * (g[at(c)] as f64 - s)) as f32;
                        }
                    }
                }
                out.push((input, dx));
            }
            &Op::Map { input, derivative } => {
                let dx = self.value(input).iter().zip(g).map(|(&v, &d)| d * derivative(v)).collect();
                out.push((input, dx));
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|d| -d).collect()));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, self.value(b).iter().zip(g).map(|(&y, &d)| y * d).collect()));
                }
                if self.wants(b) {
                    out.push((b, self.value(a).iter().zip(g).map(|(&x, &d)| x * d).collect()));
                }
            }
            &Op::ScalarMul { input, scalar } => {
                let s = self.value(scalar)[0];
                if self.wants(input) {
                    out.push((input, g.iter().map(|d| d * s).collect()));
                }
                if self.wants(scalar) {
                    let ds: f64 = self.value(input).iter().zip(g).map(|(&x, &d)| x as f64 * d as f64).sum();
                    out.push((scalar, vec![ds as f32]));
                }
            }
            &Op::ScalarAdd { input, scalar } => {
                out.push((input, g.to_vec()));
                if self.wants(scalar) {
                    out.push((scalar, vec![g.iter().map(|&d| d as f64).sum::<f64>() as f32]));
                }
            }
            &Op::Square(x) => {
                out.push((x, self.value(x).iter().zip(g).map(|(&v, &d)| 2.0 * v * d).collect()));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Reduce {
                input,
                kind,
                index,
                count,
            } => {
                let len = self.value(*input).len();
                let dx = match kind {
                    ReduceKind::Sum => index.iter().map(|&s| g[s]).collect(),
                    ReduceKind::Mean => {
                        let c = *count as f32;
                        index.iter().map(|&s| g[s] / c).collect()
                    }
                    ReduceKind::Max => {
                        let mut dx = vec![0.0; len];
                        for (s, &src) in index.iter().enumerate() {
                            dx[src] += g[s];
                        }
                        dx
                    }
                };
                out.push((*input, dx));
            }
            &Op::Loss { kind, pred, target } => {
                let p = self.value(pred);
                let t = self.value(target);
                let up = g[0] as f64;
                match kind {
                    LossKind::PixelCrossEntropy => {
                        let [n, k, h, w] = <[usize; 4]>::try_from(self.shape(pred)).expect("checked in forward");
                        let plane = h * w;
                        let scale = up / (n * plane) as f64;
                        let mut dp = vec![0.0; p.len()];
                        for b in 0..n {
                            for q in 0..plane {
                                let idx = (b * k + t[b * plane + q] as usize) * plane + q;
                                let prob = p[idx] as f64;
                                if prob >= PROB_EPS {
                                    dp[idx] = (-scale / prob) as f32;
                                }
                            }
                        }
                        out.push((pred, dp));
                    }
                    _ => {
                        let scale = up / p.len() as f64;
                        let dp: Vec<f32> = p
                            .iter()
                            .zip(t)
                            .map(|(&x, &y)| {
                                let (x, y) = (x as f64, y as f64);
                                let d = match kind {
                                    LossKind::BceWithLogits => {
                                        let s = if x >= 0.0 {
                                            1.0 / (1.0 + (-x).exp())
                                        } else {
                                            let e = x.exp();
                                            e / (1.0 + e)
                                        };
                                        s - y
                                    }
                                    LossKind::Bce => {
                                        let q = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                                        (q - y) / (q * (1.0 - q))
                                    }
                                    LossKind::L1 => {
                                        if x > y {
                                            1.0
                                        } else if x < y {
                                            -1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    LossKind::L2 => 2.0 * (x - y),
                                    LossKind::PixelCrossEntropy => unreachable!(),
                                };
                                (d * scale) as f32
                            })
                            .collect();
                        if self.wants(target) && matches!(kind, LossKind::L1 | LossKind::L2) {
                            out.push((target, dp.iter().map(|d| -d).collect()));
                        }
                        if self.wants(pred) {
                            out.push((pred, dp));
                        }
                    }
                }
            }
        }
        out
    }
}

fn push_conv_grads(out: &mut Vec<(Var, Vec<f32>)>, input: Var, kernel: Var, bias: Option<Var>, grads: kernels::ConvGrads) {
    if let Some(dx) = grads.input {
        out.push((input, dx));
    }
    if let Some(dk) = grads.kernel {
        out.push((kernel, dk));
    }
    if let (Some(b), Some(db)) = (bias, grads.bias) {
        out.push((b, db));
    }
}
