//! Parameterised building blocks shared by the PiNet, the Grad-CAM baseline
//! and the segmentation models.
//!
//! A model owns its parameters as plain tensors. For each forward pass the
//! parameters are copied onto a fresh tape with [`bind`], and the resulting
//! variables are consumed in a fixed order through a [`Cursor`].

use pinet_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Prng;

pub fn uniform_tensor(shape: &[usize], bound: f32, rng: &mut Prng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Records every parameter on `tape`, as trainable leaves or as constants.
pub fn bind(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if trainable { tape.param(p) } else { tape.constant((*p).clone()) })
        .collect()
}

/// Hands out bound parameter variables in declaration order.
pub struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| CoreError::Model("fewer bound variables than parameters".into()))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
        ConvLayer {
            kernel: uniform_tensor(&[c_out, c_in, k, k], bound, rng),
            bias: uniform_tensor(&[c_out], bound, rng),
            stride,
            padding,
            transposed: false,
        }
    }

    /// Fan-in counts the kernel taps that actually overlap one output pixel.
    pub fn transposed(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Prng) -> Self {
        let taps = (k * k / (stride * stride)).max(1);
        let bound = 1.0 / ((c_in * taps) as f32).sqrt();
        ConvLayer {
            kernel: uniform_tensor(&[c_in, c_out, k, k], bound, rng),
            bias: uniform_tensor(&[c_out], bound, rng),
            stride,
            padding,
            transposed: true,
        }
    }

    fn scale_kernel(&mut self, gain: f32) {
        if gain != 1.0 {
            self.kernel.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
    }

    pub fn apply(&self, tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<Var> {
        let k = cur.next()?;
        let b = cur.next()?;
        let y = if self.transposed {
            tape.conv2d_transposed(x, k, Some(b), self.stride, self.padding)?
        } else {
            tape.conv2d(x, k, Some(b), self.stride, self.padding)?
        };
        Ok(y)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Dense {
            weight: uniform_tensor(&[d_out, d_in], bound, rng),
            bias: uniform_tensor(&[d_out], bound, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<Var> {
        let w = cur.next()?;
        let b = cur.next()?;
        Ok(tape.affine(x, w, Some(b))?)
    }
}

/// Sizes shared by every encoder/decoder stack in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder widths; each stage is a 3x3 convolution.
    pub widths: Vec<usize>,
    /// Stride of each encoder stage, 1 or 2.
    pub strides: Vec<usize>,
    /// Kernel of the stride-2 transposed convolutions in the decoder.
    pub decoder_kernel: usize,
    /// Initial bias of the decoder's last layer.
    pub coefficient_bias_init: f32,
    /// Multiplier on the `1/sqrt(fan_in)` kernel init bound of conv layers.
    pub init_gain: f32,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            image_size: 32,
            in_channels: 1,
            out_channels: 1,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 1, 1],
            decoder_kernel: 4,
            coefficient_bias_init: -6.0,
            init_gain: 1.0,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CoreError::Model("encoder needs at least one non-empty stage".into()));
        }
        if self.strides.len() != self.widths.len() || self.strides.iter().any(|s| !(1..=2).contains(s)) {
            return Err(CoreError::Model(format!(
                "strides {:?} must give 1 or 2 for each of the {} stages",
                self.strides,
                self.widths.len()
            )));
        }
        let scale = self.scale();
        if self.image_size == 0 || !self.image_size.is_multiple_of(scale) {
            return Err(CoreError::Model(format!(
                "image size {} is not divisible by the encoder stride {scale}",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::Model("channel counts must be positive".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(CoreError::Model(format!("init_gain {} must be positive", self.init_gain)));
        }
        if self.decoder_kernel < 2 || !self.decoder_kernel.is_multiple_of(2) {
            return Err(CoreError::Model(format!(
                "decoder kernel {} must be even so stride 2 doubles the extent",
                self.decoder_kernel
            )));
        }
        Ok(())
    }

    /// Spatial side of the encodings.
    pub fn code_size(&self) -> usize {
        self.image_size / self.scale()
    }

    /// Total downsampling factor of the encoder.
    pub fn scale(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn code_len(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.code_size() * self.code_size()
    }

    /// Kernel and padding of the decoder stage undoing an encoder stride.
    fn decoder_geometry(&self, stride: usize) -> (usize, usize) {
        if stride == 2 {
            (self.decoder_kernel, (self.decoder_kernel - 2) / 2)
        } else {
            (3, 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn new(arch: &Arch, rng: &mut Prng) -> Self {
        let mut c = arch.in_channels;
        let layers = arch
            .widths
            .iter()
            .zip(&arch.strides)
            .map(|(&w, &stride)| {
                let mut l = ConvLayer::conv(c, w, 3, stride, 1, rng);
                l.scale_kernel(arch.init_gain);
                c = w;
                l
            })
            .collect();
        Encoder { layers }
    }

    /// Features after every stage; the last entry is the encoding.
    pub fn forward_all(&self, tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let y = l.apply(tape, cur, h)?;
            h = tape.relu(y);
            out.push(h);
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<Var> {
        Ok(*self.forward_all(tape, cur, x)?.last().expect("at least one stage"))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.kernel"), format!("{prefix}.{i}.bias")])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    /// Transposed convolutions mirroring the encoder.
    Adequate(Vec<ConvLayer>),
    /// Flatten, one dense map to every output pixel, reshape.
    Naive(Dense),
}

impl Decoder {
    pub fn adequate(arch: &Arch, rng: &mut Prng) -> Self {
        let mut chans: Vec<usize> = arch.widths.iter().rev().copied().collect();
        chans.push(arch.out_channels);
        let mut layers: Vec<ConvLayer> = chans
            .windows(2)
            .zip(arch.strides.iter().rev())
            .map(|(w, &stride)| {
                let (k, pad) = arch.decoder_geometry(stride);
                let mut l = ConvLayer::transposed(w[0], w[1], k, stride, pad, rng);
                l.scale_kernel(arch.init_gain);
                l
            })
            .collect();
        let last = layers.last_mut().expect("at least one stage");
        last.bias.data_mut().iter_mut().for_each(|b| *b = arch.coefficient_bias_init);
        Decoder::Adequate(layers)
    }

    pub fn naive(arch: &Arch, rng: &mut Prng) -> Self {
        let out = arch.out_channels * arch.image_size * arch.image_size;
        let mut dense = Dense::new(arch.code_len(), out, rng);
        dense.bias.data_mut().iter_mut().for_each(|b| *b = arch.coefficient_bias_init);
        Decoder::Naive(dense)
    }

    /// Pre-activation decoder output `[N, out_channels, H, W]`.
    pub fn forward(&self, arch: &Arch, tape: &mut Tape, cur: &mut Cursor, code: Var) -> Result<Var> {
        match self {
            Decoder::Adequate(layers) => {
                let mut h = code;
                for (i, l) in layers.iter().enumerate() {
                    h = l.apply(tape, cur, h)?;
                    if i + 1 < layers.len() {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            Decoder::Naive(dense) => {
                let n = tape.shape(code)[0];
                let flat = tape.reshape(code, &[n, arch.code_len()])?;
                let y = dense.apply(tape, cur, flat)?;
                Ok(tape.reshape(y, &[n, arch.out_channels, arch.image_size, arch.image_size])?)
            }
        }
    }

    pub fn is_naive(&self) -> bool {
        matches!(self, Decoder::Naive(_))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Decoder::Adequate(layers) => layers.iter().flat_map(|l| l.params()).collect(),
            Decoder::Naive(d) => vec![&d.weight, &d.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Decoder::Adequate(layers) => layers.iter_mut().flat_map(|l| l.params_mut()).collect(),
            Decoder::Naive(d) => vec![&mut d.weight, &mut d.bias],
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Decoder::Adequate(layers) => (0..layers.len())
                .flat_map(|i| [format!("{prefix}.{i}.kernel"), format!("{prefix}.{i}.bias")])
                .collect(),
            Decoder::Naive(_) => vec![format!("{prefix}.dense.weight"), format!("{prefix}.dense.bias")],
        }
    }
}

/// Splits `[N, ...]` into consecutive chunks of at most `chunk` items along
/// axis 0, applies `f`, and concatenates the results along axis 0.
pub fn map_chunks(input: &Tensor, chunk: usize, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = *input
        .shape()
        .first()
        .ok_or_else(|| CoreError::Usage("batched input needs a leading axis".into()))?;
    if n <= chunk {
        return f(input);
    }
    let mut data = Vec::new();
    let mut tail: Option<Vec<usize>> = None;
    let per = input.len() / n;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mut shape = input.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(shape, input.data()[start * per..end * per].to_vec())?;
        let out = f(&part)?;
        tail.get_or_insert_with(|| out.shape()[1..].to_vec());
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend(tail.unwrap_or_default());
    Ok(Tensor::new(shape, data)?)
}
