//! Baseline CNN (PiNet encoder, global average pooling, one logit) and its
//! Grad-CAM attribution maps.

use pinet_tensor::{upsample_bilinear, Axes, LossKind, ReduceKind, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::layers::{bind, map_chunks, Arch, Cursor, Dense, Encoder};
use crate::pinet::{as_batch, Explainer, Predictor, INFERENCE_CHUNK};
use crate::rng::{derive_seed, prng};
use crate::toyshapes::Dataset;
use crate::training::{evaluate_accuracy, fit, Batches, RunResult, TrainConfig, Trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineCNN {
    pub arch: Arch,
    pub encoder: Encoder,
    pub head: Dense,
}

impl BaselineCNN {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = prng(seed);
        let encoder = Encoder::new(&arch, &mut rng);
        let width = *arch.widths.last().expect("validated");
        let head = Dense::new(width, 1, &mut rng);
        Ok(BaselineCNN { arch, encoder, head })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.push("head.weight".into());
        n.push("head.bias".into());
        n
    }

    fn encoder_var_count(&self) -> usize {
        2 * self.encoder.layers.len()
    }

    /// Logits `[N]` from the encoding `[N, C, h, w]`.
    pub fn head_on(&self, tape: &mut Tape, vars: &[Var], code: Var) -> Result<Var> {
        let mut cur = Cursor::new(&vars[self.encoder_var_count()..]);
        let pooled = tape.reduce(code, ReduceKind::Mean, Axes::List(vec![2, 3]))?;
        let y = self.head.apply(tape, &mut cur, pooled)?;
        let n = tape.shape(y)[0];
        Ok(tape.reshape(y, &[n])?)
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut cur = Cursor::new(vars);
        let code = self.encoder.forward(tape, &mut cur, x)?;
        self.head_on(tape, vars, code)
    }

    /// Grad-CAM on the last encoder stage: gradients of the logit with
    /// respect to the feature maps are rectified elementwise, averaged per
    /// channel, used to weight the maps, rectified again and resized to the
    /// input. Returns `[N, H, W]`.
    pub fn gradcam(&self, x: &Tensor) -> Result<Tensor> {
        let x = as_batch(x)?;
        let s = self.arch.image_size;
        map_chunks(&x, INFERENCE_CHUNK, |chunk| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &self.params(), false);
            let xv = tape.constant(chunk.clone());
            let mut cur = Cursor::new(&vars);
            let code = self.encoder.forward(&mut tape, &mut cur, xv)?;
            // Re-enter the features as a differentiable leaf so the gradient
            // stops there.
            let features = tape.tensor(code).with_grad();
            let fv = tape.leaf(&features);
            let logits = self.head_on(&mut tape, &vars, fv)?;
            let root = tape.sum_all(logits)?;
            tape.backward(root)?;
            let [n, c, h, w] = <[usize; 4]>::try_from(features.shape()).expect("rank-4 encoding");
            let zeros = vec![0.0; features.len()];
            let grad = tape.grad(fv).unwrap_or(&zeros);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CoreError::Numerical("non-finite Grad-CAM gradient".into()));
            }
            let plane = h * w;
            let mut cam = vec![0.0f32; n * plane];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    let g = &grad[base..base + plane];
                    let weight = g.iter().map(|v| v.max(0.0) as f64).sum::<f64>() / plane as f64;
                    if weight == 0.0 {
                        continue;
                    }
                    let a = &features.data()[base..base + plane];
                    for (dst, &v) in cam[i * plane..(i + 1) * plane].iter_mut().zip(a) {
                        *dst += (weight * v as f64) as f32;
                    }
                }
            }
            cam.iter_mut().for_each(|v| *v = v.max(0.0));
            let cam = Tensor::new(vec![n, h, w], cam)?;
            Ok(upsample_bilinear(&cam, s, s)?)
        })
    }
}

impl Trainable for BaselineCNN {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }
}

impl Predictor for BaselineCNN {
    fn predict_logits(&self, images: &Tensor) -> Result<Vec<f32>> {
        let x = as_batch(images)?;
        let out = map_chunks(&x, INFERENCE_CHUNK, |chunk| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &self.params(), false);
            let xv = tape.constant(chunk.clone());
            let y = self.forward_on(&mut tape, &vars, xv)?;
            Ok(tape.tensor(y))
        })?;
        Ok(out.into_data())
    }
}

impl Explainer for BaselineCNN {
    fn explain(&self, images: &Tensor) -> Result<Tensor> {
        self.gradcam(images)
    }
}

pub fn train_baseline(data: &Dataset, cfg: &TrainConfig, arch: &Arch, seed: u64) -> Result<RunResult<BaselineCNN>> {
    cfg.validate()?;
    let train = Batches::new(&data.train)?;
    let val = Batches::new(&data.val)?;
    let mut model = BaselineCNN::new(arch.clone(), derive_seed(seed, "init", 0))?;
    let log = fit(
        &mut model,
        train.len(),
        cfg,
        derive_seed(seed, "shuffle", 0),
        |m, tape, vars, step| {
            let (x, y) = train.gather_step(step)?;
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let logits = m.forward_on(tape, vars, xv)?;
            Ok(tape.loss(logits, yv, LossKind::BceWithLogits)?)
        },
        |m| evaluate_accuracy(m, &val),
    )?;
    let accepted = !log.diverged && log.final_val_acc() >= cfg.checkpoint_min_val_acc;
    Ok(RunResult {
        model,
        accepted,
        seed,
        log,
    })
}
