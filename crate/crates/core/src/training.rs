//! Training protocol shared by every classifier: Adam on mini-batches,
//! early stop at perfect validation accuracy, and an acceptance gate on the
//! final validation accuracy.

use log::{debug, warn};
use pinet_tensor::{flush_subnormals, AdamState, LossKind, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::{bind, Arch};
use crate::pinet::{accuracy, EnsembleModel, PiNetModel, Predictor, Variant};
use crate::rng::{derive_seed, prng};
use crate::toyshapes::{stack_examples, Dataset, LabeledExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train: usize,
    pub val_frac: f64,
    pub max_epochs: usize,
    pub early_stop_val_acc: f64,
    pub checkpoint_min_val_acc: f64,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda_rec: f32,
    pub lambda_att: f32,
    pub n_strong_maps: usize,
    pub n_runs: usize,
    pub ensemble_size: usize,
    /// Mirror each training item left-right with probability 1/2.
    pub mirror_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 1000,
            val_frac: 0.2,
            max_epochs: 50,
            early_stop_val_acc: 1.0,
            checkpoint_min_val_acc: 0.98,
            batch_size: 32,
            lr: 2e-3,
            lambda_rec: 0.1,
            lambda_att: 1.0,
            n_strong_maps: 25,
            n_runs: 5,
            ensemble_size: 10,
            mirror_augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad("val_frac must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lambda_rec < 0.0 || self.lambda_att < 0.0 || !(self.lr > 0.0) {
            return bad("loss weights must be non-negative and lr positive");
        }
        if self.n_train == 0 || self.max_epochs == 0 {
            return bad("n_train and max_epochs must be positive");
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let val = (self.n_train as f64 * self.val_frac).round() as usize;
        (self.n_train - val, val)
    }
}

/// Per-epoch record of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub steps_per_epoch: usize,
    /// Strong-map indices consumed, one list per epoch (strong variant only).
    pub strong_usage: Vec<Vec<usize>>,
    pub diverged: bool,
}

impl FitLog {
    pub fn final_val_acc(&self) -> f64 {
        self.val_curve.last().copied().unwrap_or(0.0)
    }

    pub fn initial_train_loss(&self) -> f64 {
        self.loss_curve.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult<M> {
    pub model: M,
    pub accepted: bool,
    pub seed: u64,
    pub log: FitLog,
}

impl<M> RunResult<M> {
    pub fn val_acc(&self) -> f64 {
        self.log.final_val_acc()
    }
}

/// JSON log line for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub val_acc: f64,
    pub accepted: bool,
    pub loss_curve: Vec<f64>,
}

impl<M> RunResult<M> {
    pub fn to_log(&self, variant: &str) -> RunLog {
        RunLog {
            variant: variant.to_string(),
            seed: self.seed,
            epochs: self.log.epochs,
            val_acc: self.val_acc(),
            accepted: self.accepted,
            loss_curve: self.log.loss_curve.clone(),
        }
    }
}

/// What the generic loop needs from a model.
pub trait Trainable {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Trainable for PiNetModel {
    fn params(&self) -> Vec<&Tensor> {
        PiNetModel::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        PiNetModel::params_mut(self)
    }
}

/// One optimizer step's view of the data.
pub struct Step<'a> {
    pub indices: &'a [usize],
    /// Per item: whether to mirror it left-right.
    pub flips: &'a [bool],
    pub step_in_epoch: usize,
}

/// Reverses every row of the items flagged in `flips`; `t` is `[N, ..., W]`.
pub fn mirror_items(t: &mut Tensor, flips: &[bool]) -> Result<()> {
    let (n, w) = match t.shape() {
        [n, .., w] if *n == flips.len() => (*n, *w),
        other => return Err(CoreError::Usage(format!("cannot mirror {other:?} with {} flags", flips.len()))),
    };
    let item = t.len() / n.max(1);
    for (chunk, &flip) in t.data_mut().chunks_mut(item).zip(flips) {
        if flip {
            chunk.chunks_mut(w).for_each(|row| row.reverse());
        }
    }
    Ok(())
}

/// Generic mini-batch loop. `batch_loss` records the scalar loss of one step
/// on the tape; `validate` returns validation accuracy after each epoch.
pub fn fit<M, L, V>(model: &mut M, n_items: usize, cfg: &TrainConfig, shuffle_seed: u64, batch_loss: L, validate: V) -> Result<FitLog>
where
    M: Trainable,
    L: FnMut(&M, &mut Tape, &[Var], &Step) -> Result<Var>,
    V: FnMut(&M) -> Result<f64>,
{
    flush_subnormals(|| fit_inner(model, n_items, cfg, shuffle_seed, batch_loss, validate))
}

fn fit_inner<M, L, V>(model: &mut M, n_items: usize, cfg: &TrainConfig, shuffle_seed: u64, mut batch_loss: L, mut validate: V) -> Result<FitLog>
where
    M: Trainable,
    L: FnMut(&M, &mut Tape, &[Var], &Step) -> Result<Var>,
    V: FnMut(&M) -> Result<f64>,
{
    if n_items == 0 {
        return Err(CoreError::Usage("no training items".into()));
    }
    let mut rng = prng(shuffle_seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut log = FitLog {
        steps_per_epoch: n_items.div_ceil(cfg.batch_size),
        ..FitLog::default()
    };
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (step_in_epoch, indices) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Vec<bool> = indices.iter().map(|_| cfg.mirror_augment && rng.random::<bool>()).collect();
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &model.params(), true);
            let step = Step {
                indices,
                flips: &flips,
                step_in_epoch,
            };
            let loss = batch_loss(model, &mut tape, &vars, &step)?;
            let value = tape.scalar_value(loss)? as f64;
            if !value.is_finite() {
                warn!("non-finite loss at epoch {epoch}, aborting run");
                log.diverged = true;
                log.epochs = epoch + 1;
                return Ok(log);
            }
            total += value;
            tape.backward(loss)?;
            let mut params = model.params_mut();
            for (p, &v) in params.iter_mut().zip(&vars) {
                match tape.grad(v) {
                    Some(g) => p.accumulate_grad(g)?,
                    None => p.accumulate_grad(&vec![0.0; p.len()])?,
                }
            }
            adam.step(&mut params)?;
        }
        log.loss_curve.push(total / log.steps_per_epoch as f64);
        let acc = validate(model)?;
        log.val_curve.push(acc);
        log.epochs = epoch + 1;
        debug!("epoch {epoch}: loss {:.4} val {:.3}", log.final_train_loss(), acc);
        if acc >= cfg.early_stop_val_acc {
            break;
        }
    }
    Ok(log)
}

/// Stacked tensors of one split, kept around for the whole run.
pub struct Batches {
    pub images: Tensor,
    pub labels: Tensor,
    pub gts: Tensor,
    item: usize,
    side: usize,
}

impl Batches {
    pub fn new(examples: &[LabeledExample]) -> Result<Self> {
        let (images, labels, gts) = stack_examples(examples)?;
        let item = images.len() / examples.len();
        let side = gts.shape()[1];
        Ok(Batches {
            images,
            labels,
            gts,
            item,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut x = Vec::with_capacity(indices.len() * self.item);
        for &i in indices {
            x.extend_from_slice(self.images.outer(i));
        }
        let y = indices.iter().map(|&i| self.labels.data()[i]).collect();
        Ok((Tensor::new(shape, x)?, Tensor::new(vec![indices.len()], y)?))
    }

    /// Images and labels of one training step, mirrored as the step asks.
    pub fn gather_step(&self, step: &Step) -> Result<(Tensor, Tensor)> {
        let (mut x, y) = self.gather(step.indices)?;
        mirror_items(&mut x, step.flips)?;
        Ok((x, y))
    }

    /// Ground-truth map of item `i` as `[1, 1, H, W]`.
    pub fn gt(&self, i: usize) -> Result<Tensor> {
        Ok(Tensor::new(vec![1, 1, self.side, self.side], self.gts.outer(i).to_vec())?)
    }
}

/// Mean squared difference between the first and the recursive map.
pub fn feedback_loss(tape: &mut Tape, pi: Var, pi_rec: Var) -> Result<Var> {
    if tape.shape(pi) != tape.shape(pi_rec) {
        return Err(CoreError::Usage(format!(
            "feedback loss on maps of shape {:?} and {:?}",
            tape.shape(pi),
            tape.shape(pi_rec)
        )));
    }
    Ok(tape.loss(pi, pi_rec, LossKind::L2)?)
}

/// Pixelwise binary cross-entropy against a ground-truth map.
pub fn attribution_loss(tape: &mut Tape, pi: Var, gt: Var) -> Result<Var> {
    if tape.shape(pi) != tape.shape(gt) {
        return Err(CoreError::Usage(format!(
            "attribution loss on maps of shape {:?} and {:?}",
            tape.shape(pi),
            tape.shape(gt)
        )));
    }
    Ok(tape.loss(pi, gt, LossKind::Bce)?)
}

/// Indices of the first `n` positive training examples.
pub fn strong_indices(train: &[LabeledExample], n: usize) -> Vec<usize> {
    train.iter().enumerate().filter(|(_, e)| e.label == 1).map(|(i, _)| i).take(n).collect()
}

pub fn evaluate_accuracy<P: Predictor>(model: &P, batches: &Batches) -> Result<f64> {
    let logits = model.predict_logits(&batches.images)?;
    Ok(accuracy(&logits, batches.labels.data()))
}

fn weighted(tape: &mut Tape, base: Var, term: Var, weight: f32) -> Result<Var> {
    let w = tape.constant(Tensor::full(&[1], weight));
    let scaled = tape.scale_by(term, w)?;
    Ok(tape.add(base, scaled)?)
}

/// Trains one PiNet of the given variant. Parameter and shuffle streams are
/// derived from `seed`.
pub fn train_variant(variant: Variant, data: &Dataset, cfg: &TrainConfig, arch: &Arch, seed: u64) -> Result<RunResult<PiNetModel>> {
    cfg.validate()?;
    let train = Batches::new(&data.train)?;
    let val = Batches::new(&data.val)?;
    let mut model = PiNetModel::new(variant, arch.clone(), derive_seed(seed, "init", 0))?;
    let strong = if variant == Variant::Strong {
        let idx = strong_indices(&data.train, cfg.n_strong_maps);
        if idx.is_empty() {
            return Err(CoreError::Usage("strong supervision needs at least one positive training example".into()));
        }
        idx
    } else {
        Vec::new()
    };
    let mut usage: Vec<Vec<usize>> = Vec::new();
    let mut log = fit(
        &mut model,
        train.len(),
        cfg,
        derive_seed(seed, "shuffle", 0),
        |m, tape, vars, step| {
            let (x, y) = train.gather_step(step)?;
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let mut loss = match variant {
                Variant::Feedback => {
                    let r = m.recursive_on(tape, vars, xv)?;
                    let cls = tape.loss(r.first.logit, yv, LossKind::BceWithLogits)?;
                    let rec = feedback_loss(tape, r.first.pi, r.second.pi)?;
                    weighted(tape, cls, rec, cfg.lambda_rec)?
                }
                _ => {
                    let out = m.forward_on(tape, vars, xv)?;
                    tape.loss(out.logit, yv, LossKind::BceWithLogits)?
                }
            };
            if variant == Variant::Strong {
                if step.step_in_epoch == 0 {
                    usage.push(Vec::new());
                }
                let which = step.step_in_epoch % strong.len();
                let i = strong[which];
                usage.last_mut().expect("pushed at step 0").push(which);
                let (xs, _) = train.gather(&[i])?;
                let xs = tape.constant(xs);
                let gt = tape.constant(train.gt(i)?);
                let pi = m.coefficients_on(tape, vars, xs)?;
                let att = attribution_loss(tape, pi, gt)?;
                loss = weighted(tape, loss, att, cfg.lambda_att)?;
            }
            Ok(loss)
        },
        |m| evaluate_accuracy(m, &val),
    )?;
    log.strong_usage = usage;
    let accepted = !log.diverged && log.final_val_acc() >= cfg.checkpoint_min_val_acc;
    Ok(RunResult {
        model,
        accepted,
        seed,
        log,
    })
}

/// Retries `train` with fresh seeds until a run is accepted or `attempts`
/// runs were made. Returns the accepted run, or the last one.
pub fn train_until_accepted<M>(seed: u64, attempts: usize, mut train: impl FnMut(u64) -> Result<RunResult<M>>) -> Result<(RunResult<M>, usize)> {
    let mut last = None;
    for k in 0..attempts.max(1) {
        let run = train(derive_seed(seed, "attempt", k as u64))?;
        if run.accepted {
            return Ok((run, k + 1));
        }
        last = Some(run);
    }
    Ok((last.expect("at least one attempt"), attempts.max(1)))
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    /// Accepted members only; `None` if no member was accepted.
    pub ensemble: Option<EnsembleModel>,
    pub member_logs: Vec<FitLog>,
    pub attempts: usize,
    /// Fewer than `ensemble_size` members were accepted within the budget.
    pub partial: bool,
}

/// Trains default PiNets with distinct seeds until `ensemble_size` are
/// accepted or `2 * ensemble_size` attempts are spent.
pub fn train_ensemble(cfg: &TrainConfig, data: &Dataset, arch: &Arch, seed: u64) -> Result<EnsembleResult> {
    cfg.validate()?;
    let m = cfg.ensemble_size;
    let mut members = Vec::new();
    let mut member_logs = Vec::new();
    let mut attempts = 0;
    while members.len() < m && attempts < 2 * m {
        let run = train_variant(Variant::Default, data, cfg, arch, derive_seed(seed, "member", attempts as u64))?;
        attempts += 1;
        if run.accepted {
            member_logs.push(run.log);
            members.push(run.model);
        }
    }
    let partial = members.len() < m;
    if partial {
        warn!("ensemble has {} of {m} accepted members after {attempts} attempts", members.len());
    }
    let ensemble = if members.is_empty() { None } else { Some(EnsembleModel::new(members)?) };
    Ok(EnsembleResult {
        ensemble,
        member_logs,
        attempts,
        partial,
    })
}
