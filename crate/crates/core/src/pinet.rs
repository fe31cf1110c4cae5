//! Binary PiNet classifiers: `logit = a + b^2 * sum(pi(x) * z)` with
//! `pi = sigmoid(decoder(encoder(x)))` and `z = x` (hard look) or `z = 1`
//! (soft look).

use std::fmt;
use std::str::FromStr;

use pinet_tensor::{Axes, ReduceKind, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::{bind, map_chunks, Arch, Cursor, Decoder, Encoder};
use crate::rng::prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Soft,
    Default,
    Feedback,
    Strong,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Naive, Variant::Soft, Variant::Default, Variant::Feedback, Variant::Strong];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Soft => "soft",
            Variant::Default => "default",
            Variant::Feedback => "feedback",
            Variant::Strong => "strong",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Usage(format!("unknown variant {s:?}; expected one of naive, soft, default, feedback, strong")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondLook {
    /// Coefficients multiply the input pixels.
    Hard,
    /// The input is replaced by ones; coefficients are summed directly.
    Soft,
}

/// Anything that maps a batch `[N, C, H, W]` to one logit per item.
pub trait Predictor {
    fn predict_logits(&self, images: &Tensor) -> Result<Vec<f32>>;
}

/// A predictor that also returns a raw attribution map `[N, H, W]` per item.
pub trait Explainer: Predictor {
    fn explain(&self, images: &Tensor) -> Result<Tensor>;
}

pub(crate) const INFERENCE_CHUNK: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct PiNetModel {
    pub arch: Arch,
    pub variant: Variant,
    pub look: SecondLook,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Shift, shape `[1]`.
    pub a: Tensor,
    /// Scale, shape `[1]`; enters the aggregator squared.
    pub b: Tensor,
}

/// Variables of one binary forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PiNetVars {
    /// `[N, 1, H, W]`
    pub pi: Var,
    /// `[N]`
    pub logit: Var,
}

/// Variables of a forward pass followed by a pass on `pi * x`.
#[derive(Clone, Copy, Debug)]
pub struct RecursiveVars {
    pub first: PiNetVars,
    pub second: PiNetVars,
}

impl PiNetModel {
    pub fn new(variant: Variant, arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.out_channels != 1 {
            return Err(CoreError::Model("binary PiNets emit one coefficient map".into()));
        }
        let mut rng = prng(seed);
        let encoder = Encoder::new(&arch, &mut rng);
        let decoder = if variant == Variant::Naive {
            Decoder::naive(&arch, &mut rng)
        } else {
            Decoder::adequate(&arch, &mut rng)
        };
        let look = if variant == Variant::Soft { SecondLook::Soft } else { SecondLook::Hard };
        Ok(PiNetModel {
            arch,
            variant,
            look,
            encoder,
            decoder,
            a: Tensor::full(&[1], 0.0),
            b: Tensor::full(&[1], 1.0),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.push(&self.a);
        p.push(&self.b);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(&mut self.a);
        p.push(&mut self.b);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.decoder.param_names("decoder"));
        n.push("a".into());
        n.push("b".into());
        n
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(tape, &self.params(), trainable)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.arch.image_size;
        match shape {
            [_, c, h, w] if *c == self.arch.in_channels && *h == s && *w == s => Ok(()),
            _ => Err(CoreError::Model(format!(
                "input shape {shape:?} does not match [N, {}, {s}, {s}]",
                self.arch.in_channels
            ))),
        }
    }

    /// Coefficient map `pi = sigmoid(decoder(encoder(x)))`, `[N, 1, H, W]`.
    pub fn coefficients_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut cur = Cursor::new(vars);
        let code = self.encoder.forward(tape, &mut cur, x)?;
        let raw = self.decoder.forward(&self.arch, tape, &mut cur, code)?;
        if tape.shape(raw) != tape.shape(x) {
            return Err(CoreError::Model(format!(
                "decoder output {:?} does not match the explanation space {:?}",
                tape.shape(raw),
                tape.shape(x)
            )));
        }
        Ok(tape.sigmoid(raw))
    }

    /// `a + b^2 * sum(pi * z)` per item.
    pub fn aggregate_on(&self, tape: &mut Tape, vars: &[Var], pi: Var, x: Var) -> Result<Var> {
        let n = vars.len();
        let (a, b) = (vars[n - 2], vars[n - 1]);
        let evidence = match self.look {
            SecondLook::Hard => tape.mul(pi, x)?,
            SecondLook::Soft => pi,
        };
        let total = tape.reduce(evidence, ReduceKind::Sum, Axes::List(vec![1, 2, 3]))?;
        let b2 = tape.square(b);
        let scaled = tape.scale_by(total, b2)?;
        Ok(tape.shift_by(scaled, a)?)
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<PiNetVars> {
        let pi = self.coefficients_on(tape, vars, x)?;
        let logit = self.aggregate_on(tape, vars, pi, x)?;
        Ok(PiNetVars { pi, logit })
    }

    /// Both passes on one tape. The recursive input is `pi * x` for either
    /// second look.
    pub fn recursive_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<RecursiveVars> {
        let first = self.forward_on(tape, vars, x)?;
        let filtered = tape.mul(first.pi, x)?;
        let second = self.forward_on(tape, vars, filtered)?;
        Ok(RecursiveVars { first, second })
    }

    /// Inference on `[N, 1, H, W]` (or a single `[1, H, W]` image):
    /// `(pi [N, H, W], logits)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let x = as_batch(x)?;
        let mut logits = Vec::new();
        let pi = map_chunks(&x, INFERENCE_CHUNK, |chunk| {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let xv = tape.constant(chunk.clone());
            let out = self.forward_on(&mut tape, &vars, xv)?;
            logits.extend_from_slice(tape.value(out.logit));
            let n = chunk.shape()[0];
            let s = self.arch.image_size;
            Ok(tape.tensor(out.pi).reshape(&[n, s, s])?)
        })?;
        Ok((pi, logits))
    }

    /// `(pi, pi_rec, logits, logits_rec)` for a batch.
    pub fn recursive_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>, Vec<f32>)> {
        let x = as_batch(x)?;
        let (pi, logits) = self.forward(&x)?;
        let filtered = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(pi.data()).map(|(a, b)| a * b).collect(),
        )?;
        let (pi_rec, logits_rec) = self.forward(&filtered)?;
        Ok((pi, pi_rec, logits, logits_rec))
    }

    pub fn a_value(&self) -> f32 {
        self.a.data()[0]
    }

    pub fn b_value(&self) -> f32 {
        self.b.data()[0]
    }
}

/// Accepts `[N, C, H, W]` or a single `[C, H, W]` image.
pub fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        4 => Ok(x.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok(x.clone().reshape(&shape)?)
        }
        _ => Err(CoreError::Model(format!("expected an image batch, got shape {:?}", x.shape()))),
    }
}

impl Predictor for PiNetModel {
    fn predict_logits(&self, images: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward(images)?.1)
    }
}

impl Explainer for PiNetModel {
    fn explain(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.0)
    }
}

/// Uniform average of binary PiNets.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<PiNetModel>,
}

/// Collapsed ensemble: `logit = a_bar + sum(pi_bar * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Collapsed {
    /// `[N, H, W]`, `(1/M) sum_m b_m^2 pi_m`.
    pub pi_bar: Tensor,
    pub a_bar: f32,
    pub logits: Vec<f32>,
}

impl EnsembleModel {
    pub fn new(members: Vec<PiNetModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| CoreError::Usage("an ensemble needs at least one member".into()))?;
        if members.iter().any(|m| m.arch.image_size != first.arch.image_size || m.look != first.look) {
            return Err(CoreError::Model("ensemble members must share the explanation space and second look".into()));
        }
        Ok(EnsembleModel { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Rewrites the ensemble as one PiNet and evaluates it on `x`.
    pub fn collapse(&self, x: &Tensor) -> Result<Collapsed> {
        if self.members.is_empty() {
            return Err(CoreError::Usage("an ensemble needs at least one member".into()));
        }
        let x = as_batch(x)?;
        let m = self.members.len() as f64;
        let mut acc = vec![0.0f64; x.len()];
        let mut a_acc = 0.0f64;
        for member in &self.members {
            let (pi, _) = member.forward(&x)?;
            let b2 = member.b_value() as f64 * member.b_value() as f64;
            acc.iter_mut().zip(pi.data()).for_each(|(s, &p)| *s += b2 * p as f64);
            a_acc += member.a_value() as f64;
        }
        let n = x.shape()[0];
        let s = self.members[0].arch.image_size;
        let pi_bar: Vec<f64> = acc.into_iter().map(|v| v / m).collect();
        let a_bar = a_acc / m;
        let per = s * s;
        let look = self.members[0].look;
        let logits = (0..n)
            .map(|i| {
                let px = &pi_bar[i * per..(i + 1) * per];
                let sum: f64 = match look {
                    SecondLook::Hard => px.iter().zip(&x.data()[i * per..(i + 1) * per]).map(|(p, &v)| p * v as f64).sum(),
                    SecondLook::Soft => px.iter().sum(),
                };
                (a_bar + sum) as f32
            })
            .collect();
        Ok(Collapsed {
            pi_bar: Tensor::new(vec![n, s, s], pi_bar.into_iter().map(|v| v as f32).collect())?,
            a_bar: a_bar as f32,
            logits,
        })
    }

    pub fn member_logits(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        self.members.iter().map(|m| m.predict_logits(x)).collect()
    }
}

impl Predictor for EnsembleModel {
    fn predict_logits(&self, images: &Tensor) -> Result<Vec<f32>> {
        Ok(self.collapse(images)?.logits)
    }
}

impl Explainer for EnsembleModel {
    fn explain(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.collapse(images)?.pi_bar)
    }
}

/// Fraction of items whose `logit > 0` matches the label.
pub fn accuracy(logits: &[f32], labels: &[f32]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    hits as f64 / logits.len() as f64
}
