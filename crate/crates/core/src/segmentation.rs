//! ToyFloods: synthetic three-band scenes with water bodies and no-data
//! rectangles, a per-pixel SegNet, and a regression PiNet that only sees
//! class surfaces during training.

use pinet_tensor::{Activation, Axes, LossKind, ReduceKind, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::{bind, map_chunks, Arch, Cursor, Decoder, Encoder};
use crate::mars::{SegmentationMetrics, SegmentationTally, WATER};
use crate::rng::{derive_seed, normal, prng, Prng};
use crate::toyshapes::split_counts;
use crate::training::{fit, mirror_items, RunResult, TrainConfig, Trainable};

pub const N_CLASSES: usize = 3;
pub const INVALID: usize = 0;
pub const DRY: usize = 1;
pub const N_BANDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyFloodsConfig {
    pub image_size: usize,
    /// Inclusive range of radial bumps in the water field.
    pub bumps: (usize, usize),
    pub bump_sigma: (f64, f64),
    pub bump_amplitude: (f64, f64),
    /// Pixels whose field value exceeds this are water.
    pub water_threshold: f64,
    pub max_invalid: usize,
    pub invalid_side: (usize, usize),
    /// Darkening of the water-correlated band over water.
    pub water_offset: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for ToyFloodsConfig {
    fn default() -> Self {
        ToyFloodsConfig {
            image_size: 32,
            bumps: (2, 4),
            bump_sigma: (3.0, 6.0),
            bump_amplitude: (0.6, 1.0),
            water_threshold: 0.5,
            max_invalid: 2,
            invalid_side: (4, 10),
            water_offset: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl ToyFloodsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.bumps.0 > self.bumps.1 {
            return bad(format!("bumps range {:?} is reversed", self.bumps));
        }
        if !(self.bump_sigma.0 > 0.0 && self.bump_sigma.0 <= self.bump_sigma.1) {
            return bad(format!("bump_sigma {:?} must be positive and ordered", self.bump_sigma));
        }
        if self.bump_amplitude.0 > self.bump_amplitude.1 {
            return bad(format!("bump_amplitude {:?} is reversed", self.bump_amplitude));
        }
        let (lo, hi) = self.invalid_side;
        if lo == 0 || lo > hi || hi > self.image_size {
            return bad(format!("invalid_side {:?} must lie in 1..={}", self.invalid_side, self.image_size));
        }
        if !(self.noise >= 0.0) || !self.water_offset.is_finite() {
            return bad("noise must be non-negative and water_offset finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyFloodsExample {
    /// `[3, H, W]`: terrain, water-darkened terrain, noise.
    pub image: Tensor,
    /// `[H, W]` class indices: 0 invalid, 1 no water, 2 water.
    pub mask: Tensor,
    /// Pixel count per class.
    pub surfaces: [f64; N_CLASSES],
}

/// Class histogram of a mask.
pub fn surfaces_of(mask: &[f32]) -> [f64; N_CLASSES] {
    let mut y = [0.0; N_CLASSES];
    for &c in mask {
        y[c as usize] += 1.0;
    }
    y
}

fn uniform(rng: &mut Prng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn generate_scene(config: &ToyFloodsConfig, rng: &mut Prng) -> ToyFloodsExample {
    let s = config.image_size;
    let n_bumps = rng.random_range(config.bumps.0..=config.bumps.1);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let cy = rng.random_range(0.0..s as f64);
            let cx = rng.random_range(0.0..s as f64);
            let sigma = uniform(rng, config.bump_sigma);
            let amp = uniform(rng, config.bump_amplitude);
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut mask = vec![DRY as f32; s * s];
    for r in 0..s {
        for c in 0..s {
            let field: f64 = bumps
                .iter()
                .map(|&(cy, cx, sigma, amp)| {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            if field > config.water_threshold {
                mask[r * s + c] = WATER as f32;
            }
        }
    }
    let n_invalid = rng.random_range(0..=config.max_invalid);
    for _ in 0..n_invalid {
        let (lo, hi) = config.invalid_side;
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        let top = rng.random_range(0..=s - h);
        let left = rng.random_range(0..=s - w);
        for r in top..top + h {
            mask[r * s + left..r * s + left + w].fill(INVALID as f32);
        }
    }

    let base = rng.random_range(0.4..0.7f32);
    let gy = rng.random_range(-0.15..0.15f32);
    let gx = rng.random_range(-0.15..0.15f32);
    let mut image = vec![0.0f32; N_BANDS * s * s];
    let plane = s * s;
    for r in 0..s {
        for c in 0..s {
            let d = r * s + c;
            let noise_draw = rng.random::<f32>();
            if mask[d] == INVALID as f32 {
                continue;
            }
            let terrain = base + gy * r as f32 / s as f32 + gx * c as f32 / s as f32;
            let mut eps = || config.noise * normal(rng) as f32;
            let wet = if mask[d] == WATER as f32 { config.water_offset } else { 0.0 };
            image[d] = (terrain + eps()).clamp(0.0, 1.0);
            image[plane + d] = (terrain - wet + eps()).clamp(0.0, 1.0);
            image[2 * plane + d] = noise_draw;
        }
    }
    let surfaces = surfaces_of(&mask);
    ToyFloodsExample {
        image: Tensor::new(vec![N_BANDS, s, s], image).expect("sized above"),
        mask: Tensor::new(vec![s, s], mask).expect("sized above"),
        surfaces,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloodsDataset {
    pub train: Vec<ToyFloodsExample>,
    pub val: Vec<ToyFloodsExample>,
    pub test: Vec<ToyFloodsExample>,
    /// Mean fraction of water pixels over all scenes.
    pub water_fraction: f64,
}

pub fn generate_toyfloods(config: &ToyFloodsConfig, n: usize, split: (f64, f64)) -> Result<FloodsDataset> {
    config.validate()?;
    let (n_train, n_val, _) = split_counts(n, split.0, split.1)?;
    let mut all: Vec<ToyFloodsExample> = (0..n)
        .map(|i| generate_scene(config, &mut prng(derive_seed(config.seed, "toyfloods", i as u64))))
        .collect();
    let px = (config.image_size * config.image_size) as f64;
    let water_fraction = all.iter().map(|e| e.surfaces[WATER] / px).sum::<f64>() / n as f64;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(FloodsDataset {
        train: all,
        val,
        test,
        water_fraction,
    })
}

/// Same scenes with every band replaced by its spatial mean, so no pixel
/// carries location information.
pub fn constant_images(examples: &[ToyFloodsExample]) -> Vec<ToyFloodsExample> {
    examples
        .iter()
        .map(|e| {
            let plane = e.mask.len();
            let mut data = e.image.data().to_vec();
            for band in data.chunks_mut(plane) {
                let mean = (band.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
                band.fill(mean);
            }
            ToyFloodsExample {
                image: Tensor::new(e.image.shape().to_vec(), data).expect("same shape"),
                ..e.clone()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    Segnet,
    PinetRegression,
}

impl SegMode {
    pub fn name(self) -> &'static str {
        match self {
            SegMode::Segnet => "segnet",
            SegMode::PinetRegression => "pinet_regression",
        }
    }
}

/// Architecture shared by both modes: three bands in, three class planes
/// out. He-uniform kernels keep the untrained output input-dependent, which
/// the surface-only loss needs to get started.
pub fn seg_arch() -> Arch {
    Arch {
        in_channels: N_BANDS,
        out_channels: N_CLASSES,
        coefficient_bias_init: 0.0,
        init_gain: 6f32.sqrt(),
        ..Arch::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub mode: SegMode,
    pub arch: Arch,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SegModel {
    pub fn new(mode: SegMode, arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.out_channels != N_CLASSES {
            return Err(CoreError::Model(format!("segmentation emits {N_CLASSES} class planes")));
        }
        let mut rng = prng(seed);
        let encoder = Encoder::new(&arch, &mut rng);
        let decoder = Decoder::adequate(&arch, &mut rng);
        Ok(SegModel {
            mode,
            arch,
            encoder,
            decoder,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.decoder.param_names("decoder"));
        n
    }

    /// Sets the last decoder bias to the log class frequencies of `scenes`,
    /// so an untrained model predicts the mean surfaces.
    pub fn set_class_prior(&mut self, scenes: &[ToyFloodsExample]) -> Result<()> {
        let mut totals = [0.0f64; N_CLASSES];
        for e in scenes {
            totals.iter_mut().zip(&e.surfaces).for_each(|(t, s)| *t += s);
        }
        let sum: f64 = totals.iter().sum();
        if sum == 0.0 {
            return Err(CoreError::Usage("class prior needs at least one scene".into()));
        }
        let Some(last) = self.decoder.params_mut().pop() else {
            return Err(CoreError::Model("decoder has no parameters".into()));
        };
        for (b, t) in last.data_mut().iter_mut().zip(totals) {
            // Half a pixel keeps absent classes finite.
            *b = ((t + 0.5) / (sum + 0.5 * N_CLASSES as f64)).ln() as f32;
        }
        Ok(())
    }

    /// Per-pixel class probabilities `[N, 3, H, W]`.
    pub fn pi_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let s = self.arch.image_size;
        match tape.shape(x) {
            [_, c, h, w] if *c == self.arch.in_channels && *h == s && *w == s => {}
            other => return Err(CoreError::Model(format!("input shape {other:?} does not match the segmentation model"))),
        }
        let mut cur = Cursor::new(vars);
        let code = self.encoder.forward(tape, &mut cur, x)?;
        let raw = self.decoder.forward(&self.arch, tape, &mut cur, code)?;
        Ok(tape.activation(raw, Activation::SoftmaxOverChannels)?)
    }

    /// Predicted surfaces `[N, 3]`: the sum of each class plane.
    pub fn surfaces_on(&self, tape: &mut Tape, pi: Var) -> Result<Var> {
        Ok(tape.reduce(pi, ReduceKind::Sum, Axes::List(vec![2, 3]))?)
    }

    /// `(pi [N, 3, H, W], surfaces [N, 3])` for `[N, 3, H, W]` inputs.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut surfaces = Vec::new();
        let pi = map_chunks(x, 200, |chunk| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &self.params(), false);
            let xv = tape.constant(chunk.clone());
            let pi = self.pi_on(&mut tape, &vars, xv)?;
            let y = self.surfaces_on(&mut tape, pi)?;
            surfaces.extend_from_slice(tape.value(y));
            Ok(tape.tensor(pi))
        })?;
        let n = pi.shape()[0];
        Ok((pi, Tensor::new(vec![n, N_CLASSES], surfaces)?))
    }
}

impl Trainable for SegModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

fn stack_images(examples: &[ToyFloodsExample]) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(CoreError::Usage("cannot stack an empty scene list".into()));
    }
    Ok(Tensor::stack(&examples.iter().map(|e| &e.image).collect::<Vec<_>>())?)
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * t.len() / t.shape()[0]);
    for &i in indices {
        data.extend_from_slice(t.outer(i));
    }
    Ok(Tensor::new(shape, data)?)
}

/// Training items for the SegNet: images and class masks.
pub struct MaskBatches {
    images: Tensor,
    masks: Tensor,
}

impl MaskBatches {
    pub fn new(examples: &[ToyFloodsExample]) -> Result<Self> {
        Ok(MaskBatches {
            images: stack_images(examples)?,
            masks: Tensor::stack(&examples.iter().map(|e| &e.mask).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((gather_rows(&self.images, indices)?, gather_rows(&self.masks, indices)?))
    }
}

/// Training items for the regression PiNet: images and surfaces only.
pub struct SurfaceBatches {
    images: Tensor,
    surfaces: Tensor,
}

impl SurfaceBatches {
    pub fn new(examples: &[ToyFloodsExample]) -> Result<Self> {
        let y = examples.iter().flat_map(|e| e.surfaces.map(|v| v as f32)).collect();
        Ok(SurfaceBatches {
            images: stack_images(examples)?,
            surfaces: Tensor::new(vec![examples.len(), N_CLASSES], y)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((gather_rows(&self.images, indices)?, gather_rows(&self.surfaces, indices)?))
    }
}

/// Validation score used by both modes: one minus the mean absolute surface
/// error as a fraction of the image.
pub fn surface_accuracy(model: &SegModel, data: &SurfaceBatches) -> Result<f64> {
    let (_, y_hat) = model.predict(&data.images)?;
    let px = (model.arch.image_size * model.arch.image_size) as f64;
    let err: f64 = y_hat
        .data()
        .iter()
        .zip(data.surfaces.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / y_hat.len() as f64;
    Ok(1.0 - err / px)
}

/// Trains one segmentation model. Both modes share optimizer, epochs and
/// batch size; only the loss differs. Runs are accepted unless they diverge.
pub fn train_segmentation(mode: SegMode, data: &FloodsDataset, cfg: &TrainConfig, arch: &Arch, seed: u64) -> Result<RunResult<SegModel>> {
    cfg.validate()?;
    let mut model = SegModel::new(mode, arch.clone(), derive_seed(seed, "init", 0))?;
    model.set_class_prior(&data.train)?;
    let val = SurfaceBatches::new(&data.val)?;
    let shuffle = derive_seed(seed, "shuffle", 0);
    let log = match mode {
        SegMode::Segnet => {
            let train = MaskBatches::new(&data.train)?;
            fit(
                &mut model,
                train.len(),
                cfg,
                shuffle,
                |m, tape, vars, step| {
                    let (mut x, mut mask) = train.gather(step.indices)?;
                    mirror_items(&mut x, step.flips)?;
                    mirror_items(&mut mask, step.flips)?;
                    let xv = tape.constant(x);
                    let mv = tape.constant(mask);
                    let pi = m.pi_on(tape, vars, xv)?;
                    Ok(tape.loss(pi, mv, LossKind::PixelCrossEntropy)?)
                },
                |m| surface_accuracy(m, &val),
            )?
        }
        SegMode::PinetRegression => {
            let train = SurfaceBatches::new(&data.train)?;
            fit(
                &mut model,
                train.len(),
                cfg,
                shuffle,
                |m, tape, vars, step| {
                    let (mut x, y) = train.gather(step.indices)?;
                    mirror_items(&mut x, step.flips)?;
                    let xv = tape.constant(x);
                    let yv = tape.constant(y);
                    let pi = m.pi_on(tape, vars, xv)?;
                    let y_hat = m.surfaces_on(tape, pi)?;
                    Ok(tape.loss(y_hat, yv, LossKind::L1)?)
                },
                |m| surface_accuracy(m, &val),
            )?
        }
    };
    Ok(RunResult {
        accepted: !log.diverged,
        model,
        seed,
        log,
    })
}

/// Test-set evaluation of one segmentation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvaluation {
    pub mode: SegMode,
    pub metrics: SegmentationMetrics,
    /// Mean absolute surface error per class, in pixels.
    pub surface_mae: Vec<f64>,
    /// Largest `|sum_k y_hat_k - H*W|` over the test set.
    pub conservation_error: f64,
    /// Hard water IoU with predictions paired to the ground truth of a
    /// different, randomly chosen scene.
    pub shuffled_water_iou: f64,
}

impl SegEvaluation {
    pub fn water_iou(&self) -> f64 {
        self.metrics.hard_iou[WATER].unwrap_or(0.0)
    }
}

/// Pools metrics over `(prediction, ground truth)` index pairs.
fn pooled(pi: &Tensor, y_hat: &Tensor, test: &[ToyFloodsExample], pairs: impl Iterator<Item = (usize, usize)>) -> Result<SegmentationMetrics> {
    let mut tally = SegmentationTally::new(N_CLASSES);
    for (i, j) in pairs {
        let yh: Vec<f64> = y_hat.outer(i).iter().map(|&v| v as f64).collect();
        tally.add(pi.outer(i), test[j].mask.data(), &yh, &test[j].surfaces)?;
    }
    Ok(tally.finish())
}

pub fn evaluate_segmentation(model: &SegModel, test: &[ToyFloodsExample], shuffle_seed: u64) -> Result<SegEvaluation> {
    let images = stack_images(test)?;
    let (pi, y_hat) = model.predict(&images)?;
    let n = test.len();
    let metrics = pooled(&pi, &y_hat, test, (0..n).map(|i| (i, i)))?;
    // Walking a random cycle pairs every prediction with another scene.
    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(&mut prng(shuffle_seed));
    let shuffled = pooled(&pi, &y_hat, test, (0..n).map(|p| (cycle[p], cycle[(p + 1) % n])))?;
    let px = (model.arch.image_size * model.arch.image_size) as f64;
    let mut surface_mae = vec![0.0; N_CLASSES];
    let mut conservation_error = 0.0f64;
    for (i, e) in test.iter().enumerate() {
        let (row, y) = (y_hat.outer(i), &e.surfaces);
        for k in 0..N_CLASSES {
            surface_mae[k] += (row[k] as f64 - y[k]).abs() / n as f64;
        }
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        conservation_error = conservation_error.max((total - px).abs());
    }
    Ok(SegEvaluation {
        mode: model.mode,
        metrics,
        surface_mae,
        conservation_error,
        shuffled_water_iou: shuffled.hard_iou[WATER].unwrap_or(0.0),
    })
}
