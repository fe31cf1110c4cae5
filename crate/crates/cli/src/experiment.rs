//! Training and evaluation of every run of an experiment, with checkpoints,
//! galleries and reports written under the output directory:
//!
//! ```text
//! config.json  training.json  report.json  *.csv
//! runs/run_00/{variant}.pnck  runs/run_00/ensemble/member_00.pnck
//! galleries/run_00/{images,gts,variant}.ptsr
//! masks/run_00/{variant,truth}_0.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{error, info, warn};
use pinet_core::checkpoint::{load_checkpoint, save_checkpoint};
use pinet_core::gradcam::{train_baseline, BaselineCNN};
use pinet_core::mars::{
    default_grid, detection_score, normalize_batch, optimal_threshold, recursive_accuracy_shift, threshold_range, AttributionBatch, DEFAULT_XIS,
};
use pinet_core::pinet::{EnsembleModel, Explainer, PiNetModel};
use pinet_core::rng::derive_seed;
use pinet_core::segmentation::{
    constant_images, evaluate_segmentation, generate_toyfloods, train_segmentation, FloodsDataset, SegMode, SegModel, ToyFloodsExample, N_CLASSES,
};
use pinet_core::toyshapes::{export_dataset, generate_dataset, stack_examples, Dataset, LabeledExample};
use pinet_core::training::{evaluate_accuracy, train_ensemble, train_until_accepted, train_variant, Batches, FitLog, RunResult};
use pinet_tensor::{save_tensor, Tensor};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Task, VariantName};
use crate::error::{ExperimentError, Result};
use crate::report::{export_csv, read_json, write_json, ExperimentReport, SegReport, TrainRecord, VariantReport, BASELINE, CONSTANT_CONTROL};

/// Independent seed streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub test: u64,
    pub params: u64,
}

pub fn run_seeds(master: u64, run: usize) -> RunSeeds {
    RunSeeds {
        data: derive_seed(master, "data", run as u64),
        test: derive_seed(master, "test", run as u64),
        params: derive_seed(master, "params", run as u64),
    }
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join("runs").join(format!("run_{run:02}"))
}

pub fn ensemble_dir(out: &Path, run: usize) -> PathBuf {
    run_dir(out, run).join("ensemble")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))
}

/// Training/validation data and the held-out test examples of a ToyShapes run.
pub fn toyshapes_data(cfg: &ExperimentConfig, run: usize) -> Result<(Dataset, Vec<LabeledExample>)> {
    let seeds = run_seeds(cfg.seed, run);
    let tc = cfg.train_config();
    let mut gen = cfg.toyshapes.clone();
    gen.seed = seeds.data;
    let data = generate_dataset(&gen, tc.n_train, (1.0 - tc.val_frac, tc.val_frac))?;
    gen.seed = seeds.test;
    let test = generate_dataset(&gen, cfg.n_test, (0.0, 0.0))?.test;
    Ok((data, test))
}

pub fn toyfloods_data(cfg: &ExperimentConfig, run: usize) -> Result<(FloodsDataset, Vec<ToyFloodsExample>)> {
    let seeds = run_seeds(cfg.seed, run);
    let tc = cfg.train_config();
    let mut gen = cfg.toyfloods.clone();
    gen.seed = seeds.data;
    let data = generate_toyfloods(&gen, tc.n_train, (1.0 - tc.val_frac, tc.val_frac))?;
    gen.seed = seeds.test;
    let test = generate_toyfloods(&gen, cfg.n_test, (0.0, 0.0))?.test;
    Ok((data, test))
}

/// Writes the datasets of every run as tensor files.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for run in 0..cfg.n_runs {
        let dir = out.join("data").join(format!("run_{run:02}"));
        match cfg.task {
            Task::Toyshapes => {
                let (data, test) = toyshapes_data(cfg, run)?;
                let data = Dataset { test, ..data };
                export_dataset(&dir, &cfg.toyshapes, &data)?;
            }
            Task::Toyfloods => {
                let (data, test) = toyfloods_data(cfg, run)?;
                create_dir(&dir)?;
                for (split, scenes) in [("train", &data.train), ("val", &data.val), ("test", &test)] {
                    if scenes.is_empty() {
                        continue;
                    }
                    let images = Tensor::stack(&scenes.iter().map(|e| &e.image).collect::<Vec<_>>())?;
                    let masks = Tensor::stack(&scenes.iter().map(|e| &e.mask).collect::<Vec<_>>())?;
                    let surfaces = Tensor::new(vec![scenes.len(), N_CLASSES], scenes.iter().flat_map(|e| e.surfaces.map(|v| v as f32)).collect())?;
                    save_tensor(dir.join(format!("{split}_images.ptsr")), &images)?;
                    save_tensor(dir.join(format!("{split}_masks.ptsr")), &masks)?;
                    save_tensor(dir.join(format!("{split}_surfaces.ptsr")), &surfaces)?;
                }
            }
        }
    }
    Ok(())
}

fn record<M>(variant: &str, run: usize, result: &RunResult<M>, attempts: usize) -> TrainRecord {
    let log: &FitLog = &result.log;
    TrainRecord {
        variant: variant.to_string(),
        run,
        seed: result.seed,
        attempts,
        accepted: result.accepted,
        epochs: vec![log.epochs],
        val_acc: result.val_acc(),
        loss_curve: log.loss_curve.clone(),
        val_curve: log.val_curve.clone(),
    }
}

fn failed(variant: &str, run: usize) -> TrainRecord {
    TrainRecord {
        variant: variant.to_string(),
        run,
        seed: 0,
        attempts: 0,
        accepted: false,
        epochs: Vec::new(),
        val_acc: 0.0,
        loss_curve: Vec::new(),
        val_curve: Vec::new(),
    }
}

fn model_names(cfg: &ExperimentConfig) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    if cfg.task == Task::Toyshapes {
        names.push(BASELINE.into());
    }
    names.extend(cfg.variants().iter().map(|v| v.name().to_string()));
    if cfg.task == Task::Toyfloods && cfg.constant_control && cfg.variants().contains(&VariantName::PinetRegression) {
        names.push(CONSTANT_CONTROL.into());
    }
    names
}

/// Trains every model of one run and saves the checkpoints.
pub fn train_run(cfg: &ExperimentConfig, run: usize, out: &Path) -> Result<Vec<TrainRecord>> {
    let seeds = run_seeds(cfg.seed, run);
    let tc = cfg.train_config();
    let arch = cfg.arch();
    let dir = run_dir(out, run);
    create_dir(&dir)?;
    let attempts = cfg.max_attempts;
    let mut records = Vec::new();
    match cfg.task {
        Task::Toyshapes => {
            let (data, _) = toyshapes_data(cfg, run)?;
            info!("run {run}: training {BASELINE}");
            let (res, n) = train_until_accepted(derive_seed(seeds.params, BASELINE, 0), attempts, |s| train_baseline(&data, &tc, &arch, s))?;
            save_checkpoint(dir.join(format!("{BASELINE}.pnck")), &res.model)?;
            records.push(record(BASELINE, run, &res, n));
            for v in cfg.variants() {
                info!("run {run}: training {v}");
                if let Some(variant) = v.pinet() {
                    let (res, n) = train_until_accepted(derive_seed(seeds.params, v.name(), 0), attempts, |s| train_variant(variant, &data, &tc, &arch, s))?;
                    save_checkpoint(dir.join(format!("{v}.pnck")), &res.model)?;
                    records.push(record(v.name(), run, &res, n));
                } else {
                    let seed = derive_seed(seeds.params, v.name(), 0);
                    let res = train_ensemble(&tc, &data, &arch, seed)?;
                    let edir = ensemble_dir(out, run);
                    create_dir(&edir)?;
                    let mut rec = failed(v.name(), run);
                    rec.seed = seed;
                    rec.attempts = res.attempts;
                    rec.accepted = !res.partial;
                    rec.epochs = res.member_logs.iter().map(|l| l.epochs).collect();
                    if let Some(ens) = &res.ensemble {
                        for (k, m) in ens.members.iter().enumerate() {
                            save_checkpoint(edir.join(format!("member_{k:02}.pnck")), m)?;
                        }
                        rec.val_acc = evaluate_accuracy(ens, &Batches::new(&data.val)?)?;
                    }
                    records.push(rec);
                }
            }
        }
        Task::Toyfloods => {
            let (data, _) = toyfloods_data(cfg, run)?;
            let constant = FloodsDataset {
                train: constant_images(&data.train),
                val: constant_images(&data.val),
                test: Vec::new(),
                water_fraction: data.water_fraction,
            };
            for name in model_names(cfg) {
                info!("run {run}: training {name}");
                let (mode, data) = match name.as_str() {
                    CONSTANT_CONTROL => (SegMode::PinetRegression, &constant),
                    _ => (name.parse::<VariantName>()?.seg_mode().expect("validated task"), &data),
                };
                let (res, n) = train_until_accepted(derive_seed(seeds.params, &name, 0), attempts, |s| train_segmentation(mode, data, &tc, &arch, s))?;
                save_checkpoint(dir.join(format!("{name}.pnck")), &res.model)?;
                records.push(record(&name, run, &res, n));
            }
        }
    }
    Ok(records)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Trains every run (up to `jobs` at a time) and writes `training.json`.
/// A run that fails is logged and recorded as not accepted.
pub fn train_all(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    create_dir(out)?;
    let path = out.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| ExperimentError::io(&path, e))?;
    let per_run: Vec<Vec<TrainRecord>> = pool(jobs)?.install(|| {
        (0..cfg.n_runs)
            .into_par_iter()
            .map(|run| {
                train_run(cfg, run, out).unwrap_or_else(|e| {
                    error!("run {run} failed: {e}");
                    model_names(cfg).iter().map(|n| failed(n, run)).collect()
                })
            })
            .collect()
    });
    let records: Vec<TrainRecord> = per_run.into_iter().flatten().collect();
    let path = out.join("training.json");
    fs::write(&path, serde_json::to_string_pretty(&records)?).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(records)
}

/// Stacked held-out examples of one ToyShapes run.
struct TestSet {
    images: Tensor,
    labels: Vec<f32>,
    gts: Tensor,
}

fn head(t: &Tensor, n: usize) -> Result<Tensor> {
    let n = n.min(t.shape()[0]);
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    let per = t.len() / t.shape()[0].max(1);
    Ok(Tensor::new(shape, t.data()[..n * per].to_vec())?)
}

fn evaluate_explainer<E: Explainer>(name: &str, run: usize, accepted: bool, model: &E, test: &TestSet, gallery: Option<(&Path, usize)>) -> Result<VariantReport> {
    let raw = model.explain(&test.images)?;
    let batch = normalize_batch(&AttributionBatch::new(raw, name)?)?;
    if batch.all_zero {
        warn!("run {run}: {name} produced all-zero maps");
    }
    let naive = detection_score(&batch, &test.gts)?;
    let search = optimal_threshold(&batch, &test.gts, &default_grid())?;
    let ranges = DEFAULT_XIS.iter().map(|&xi| threshold_range(&search.curve, xi)).collect::<pinet_core::Result<Vec<_>>>()?;
    let shift = recursive_accuracy_shift(model, &batch, &test.images, &test.labels)?;
    let bound_ok = naive.bound_holds(naive.score) && search.best.bound_holds(search.best.score) && search.curve.iter().all(|p| p.score <= p.tdr.min(p.tar) + 1e-12);
    if let Some((dir, n)) = gallery {
        save_tensor(dir.join(format!("{name}.ptsr")), &head(&batch.maps, n)?)?;
    }
    Ok(VariantReport {
        variant: name.to_string(),
        run,
        accepted,
        test_acc: shift.acc,
        naive,
        optimal: search.best,
        best_threshold: search.best_threshold,
        ranges,
        shift,
        bound_ok,
        curve: search.curve,
    })
}

pub fn load_ensemble(out: &Path, run: usize) -> Result<Option<EnsembleModel>> {
    let dir = ensemble_dir(out, run);
    let mut members = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("member_{k:02}.pnck"));
        if !path.exists() {
            break;
        }
        members.push(load_checkpoint::<PiNetModel>(&path)?);
    }
    Ok(if members.is_empty() { None } else { Some(EnsembleModel::new(members)?) })
}

/// Black for invalid, gray for dry land, teal for water.
pub fn tricolor(mask: &[f32], side: usize) -> RgbImage {
    const COLORS: [Rgb<u8>; N_CLASSES] = [Rgb([0, 0, 0]), Rgb([128, 128, 128]), Rgb([0, 128, 128])];
    RgbImage::from_fn(side as u32, side as u32, |x, y| COLORS[mask[y as usize * side + x as usize] as usize])
}

/// Per-pixel argmax of `[3, H, W]` probabilities, ties to the lowest class.
pub fn argmax_mask(pi: &[f32]) -> Vec<f32> {
    let plane = pi.len() / N_CLASSES;
    (0..plane)
        .map(|d| {
            let mut best = 0;
            for k in 1..N_CLASSES {
                if pi[k * plane + d] > pi[best * plane + d] {
                    best = k;
                }
            }
            best as f32
        })
        .collect()
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| ExperimentError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the checkpoints of one run and evaluates them on its test set.
pub fn evaluate_run(cfg: &ExperimentConfig, run: usize, out: &Path, training: &[TrainRecord]) -> Result<(Vec<VariantReport>, Vec<SegReport>)> {
    let dir = run_dir(out, run);
    let gdir = out.join("galleries").join(format!("run_{run:02}"));
    create_dir(&gdir)?;
    let accepted = |name: &str| training.iter().any(|t| t.run == run && t.variant == name && t.accepted);
    let trained = |name: &str| training.iter().any(|t| t.run == run && t.variant == name && t.attempts > 0);
    let g = cfg.gallery_size;
    let mut variants = Vec::new();
    let mut segs = Vec::new();
    match cfg.task {
        Task::Toyshapes => {
            let (_, test) = toyshapes_data(cfg, run)?;
            let (images, labels, gts) = stack_examples(&test)?;
            let test = TestSet {
                images,
                labels: labels.data().to_vec(),
                gts,
            };
            save_tensor(gdir.join("images.ptsr"), &head(&test.images, g)?)?;
            save_tensor(gdir.join("gts.ptsr"), &head(&test.gts, g)?)?;
            let gallery = Some((gdir.as_path(), g));
            for name in model_names(cfg) {
                if !trained(&name) {
                    continue;
                }
                let report = if name == BASELINE {
                    let m: BaselineCNN = load_checkpoint(dir.join(format!("{name}.pnck")))?;
                    evaluate_explainer(&name, run, accepted(&name), &m, &test, gallery)?
                } else if name == VariantName::Ensemble.name() {
                    match load_ensemble(out, run)? {
                        Some(ens) => evaluate_explainer(&name, run, accepted(&name), &ens, &test, gallery)?,
                        None => continue,
                    }
                } else {
                    let m: PiNetModel = load_checkpoint(dir.join(format!("{name}.pnck")))?;
                    evaluate_explainer(&name, run, accepted(&name), &m, &test, gallery)?
                };
                variants.push(report);
            }
        }
        Task::Toyfloods => {
            let (_, test) = toyfloods_data(cfg, run)?;
            let constant = constant_images(&test);
            let mdir = out.join("masks").join(format!("run_{run:02}"));
            create_dir(&mdir)?;
            let side = cfg.toyfloods.image_size;
            let n_png = g.min(4).min(test.len());
            for (i, e) in test.iter().take(n_png).enumerate() {
                save_png(&mdir.join(format!("truth_{i}.png")), &tricolor(e.mask.data(), side))?;
            }
            for name in model_names(cfg) {
                if !trained(&name) {
                    continue;
                }
                let scenes = if name == CONSTANT_CONTROL { &constant } else { &test };
                let model: SegModel = load_checkpoint(dir.join(format!("{name}.pnck")))?;
                let ev = evaluate_segmentation(&model, scenes, derive_seed(run_seeds(cfg.seed, run).params, "shuffle", 0))?;
                let shown: Vec<&Tensor> = scenes.iter().take(g).map(|e| &e.image).collect();
                let (pi, _) = model.predict(&Tensor::stack(&shown)?)?;
                save_tensor(gdir.join(format!("{name}.ptsr")), &pi)?;
                for i in 0..n_png {
                    save_png(&mdir.join(format!("{name}_{i}.png")), &tricolor(&argmax_mask(pi.outer(i)), side))?;
                }
                segs.push(SegReport {
                    variant: name.clone(),
                    run,
                    accepted: accepted(&name),
                    metrics: ev.metrics,
                    surface_mae: ev.surface_mae,
                    conservation_error: ev.conservation_error,
                    shuffled_water_iou: ev.shuffled_water_iou,
                });
            }
        }
    }
    Ok((variants, segs))
}

fn read_training(out: &Path) -> Result<Vec<TrainRecord>> {
    let path = out.join("training.json");
    let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Parse { path, source })
}

/// Evaluates every trained run found under `out` and writes `report.json`.
pub fn evaluate_all(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    let training = read_training(out)?;
    let per_run: Vec<Result<(Vec<VariantReport>, Vec<SegReport>)>> =
        pool(jobs)?.install(|| (0..cfg.n_runs).into_par_iter().map(|run| evaluate_run(cfg, run, out, &training)).collect());
    let mut report = ExperimentReport {
        task: cfg.task,
        seed: cfg.seed,
        n_runs: cfg.n_runs,
        training,
        ..Default::default()
    };
    for (run, r) in per_run.into_iter().enumerate() {
        match r {
            Ok((v, s)) => {
                report.variants.extend(v);
                report.segmentation.extend(s);
            }
            Err(e) => {
                error!("evaluation of run {run} failed: {e}");
                report.training.iter_mut().filter(|t| t.run == run).for_each(|t| t.accepted = false);
            }
        }
    }
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Rewrites the CSV exports from `report.json`.
pub fn report_from(out: &Path) -> Result<ExperimentReport> {
    let report = read_json(&out.join("report.json"))?;
    export_csv(&report, out)?;
    Ok(report)
}

/// Train, evaluate and export.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    let out = cfg.out_dir.as_path();
    train_all(cfg, out, jobs)?;
    let report = evaluate_all(cfg, out, jobs)?;
    export_csv(&report, out)?;
    Ok(report)
}
