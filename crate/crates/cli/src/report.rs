//! Experiment reports and their CSV, JSON and plot-data exports.

use std::fs;
use std::path::{Path, PathBuf};

use pinet_core::mars::{CurvePoint, DetectionScore, RangeReport, RecursiveShift, SegmentationMetrics, WATER};
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{ExperimentError, Result};

/// Name under which the Grad-CAM baseline appears in reports.
pub const BASELINE: &str = "gradcam";
/// Regression PiNet trained and tested on spatially constant images.
pub const CONSTANT_CONTROL: &str = "pinet_regression_constant";

/// Training outcome of one model in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub variant: String,
    pub run: usize,
    pub seed: u64,
    pub attempts: usize,
    pub accepted: bool,
    /// Epochs of the kept model; for ensembles, of each accepted member.
    pub epochs: Vec<usize>,
    pub val_acc: f64,
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
}

/// Explanation quality of one ToyShapes model in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub run: usize,
    pub accepted: bool,
    pub test_acc: f64,
    pub naive: DetectionScore,
    pub optimal: DetectionScore,
    pub best_threshold: f64,
    pub ranges: Vec<RangeReport>,
    pub shift: RecursiveShift,
    /// Every report satisfied `score >= a => mean TDR, mean TAR >= a`.
    pub bound_ok: bool,
    pub curve: Vec<CurvePoint>,
}

impl VariantReport {
    pub fn range(&self, xi: f64) -> Option<&RangeReport> {
        self.ranges.iter().find(|r| r.xi == xi)
    }
}

/// Test-set evaluation of one segmentation model in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub variant: String,
    pub run: usize,
    pub accepted: bool,
    pub metrics: SegmentationMetrics,
    pub surface_mae: Vec<f64>,
    pub conservation_error: f64,
    pub shuffled_water_iou: f64,
}

impl SegReport {
    pub fn water_iou(&self) -> f64 {
        self.metrics.hard_iou[WATER].unwrap_or(0.0)
    }

    pub fn water_tdr(&self) -> f64 {
        self.metrics.tdr[WATER].unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub seed: u64,
    pub n_runs: usize,
    pub training: Vec<TrainRecord>,
    pub variants: Vec<VariantReport>,
    pub segmentation: Vec<SegReport>,
}

impl ExperimentReport {
    pub fn all_accepted(&self) -> bool {
        self.training.iter().all(|t| t.accepted)
    }

    pub fn variant_reports(&self, name: &str) -> impl Iterator<Item = &VariantReport> {
        let name = name.to_string();
        self.variants.iter().filter(move |r| r.variant == name)
    }

    pub fn seg_reports(&self, name: &str) -> impl Iterator<Item = &SegReport> {
        let name = name.to_string();
        self.segmentation.iter().filter(move |r| r.variant == name)
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn write_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

pub fn read_json(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<PathBuf> {
    let err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn training_rows(report: &ExperimentReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for t in &report.training {
        for (e, loss) in t.loss_curve.iter().enumerate() {
            let val = t.val_curve.get(e).copied();
            rows.push(vec![t.variant.clone(), t.run.to_string(), e.to_string(), loss.to_string(), opt(val)]);
        }
    }
    rows
}

/// Writes every CSV of the report's task into `dir` and returns their paths.
/// ToyShapes: `violin.csv`, `ranges.csv`, `recursive.csv`, `curves.csv`;
/// ToyFloods: `segmentation.csv` and the summary `table.csv`. Both also get
/// `training.csv`.
pub fn export_csv(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let mut out = vec![write_csv(
        &dir.join("training.csv"),
        &["variant", "run", "epoch", "train_loss", "val_acc"],
        training_rows(report),
    )?];
    match report.task {
        Task::Toyshapes => {
            let v = &report.variants;
            out.push(write_csv(
                &dir.join("violin.csv"),
                &["variant", "run", "naive_score", "optimal_score", "best_threshold", "test_acc"],
                v.iter().map(|r| {
                    vec![
                        r.variant.clone(),
                        r.run.to_string(),
                        r.naive.score.to_string(),
                        r.optimal.score.to_string(),
                        r.best_threshold.to_string(),
                        r.test_acc.to_string(),
                    ]
                }),
            )?);
            out.push(write_csv(
                &dir.join("ranges.csv"),
                &["variant", "run", "xi", "intervals", "log_measure", "do_not_use"],
                v.iter().flat_map(|r| {
                    r.ranges.iter().map(move |g| {
                        let intervals: Vec<String> = g.intervals.iter().map(|(a, b)| format!("{a}:{b}")).collect();
                        vec![
                            r.variant.clone(),
                            r.run.to_string(),
                            g.xi.to_string(),
                            intervals.join(";"),
                            g.log_measure.to_string(),
                            g.do_not_use.to_string(),
                        ]
                    })
                }),
            )?);
            out.push(write_csv(
                &dir.join("recursive.csv"),
                &["variant", "run", "acc", "acc_rec", "shift", "dominant_class_acc"],
                v.iter().map(|r| {
                    vec![
                        r.variant.clone(),
                        r.run.to_string(),
                        r.shift.acc.to_string(),
                        r.shift.acc_rec.to_string(),
                        r.shift.shift.to_string(),
                        r.shift.dominant_class_acc.to_string(),
                    ]
                }),
            )?);
            out.push(write_csv(
                &dir.join("curves.csv"),
                &["variant", "run", "threshold", "score", "mean_tdr", "mean_tar"],
                v.iter().flat_map(|r| {
                    r.curve.iter().map(move |p| {
                        vec![
                            r.variant.clone(),
                            r.run.to_string(),
                            p.threshold.to_string(),
                            p.score.to_string(),
                            p.tdr.to_string(),
                            p.tar.to_string(),
                        ]
                    })
                }),
            )?);
        }
        Task::Toyfloods => {
            let s = &report.segmentation;
            out.push(write_csv(
                &dir.join("segmentation.csv"),
                &[
                    "variant",
                    "run",
                    "water_mae",
                    "water_iou",
                    "water_soft_iou",
                    "water_tdr",
                    "shuffled_water_iou",
                    "conservation_error",
                    "invalid_iou",
                    "dry_iou",
                ],
                s.iter().map(|r| {
                    vec![
                        r.variant.clone(),
                        r.run.to_string(),
                        r.metrics.water_mae.to_string(),
                        r.water_iou().to_string(),
                        opt(r.metrics.iou[WATER]),
                        r.water_tdr().to_string(),
                        r.shuffled_water_iou.to_string(),
                        r.conservation_error.to_string(),
                        opt(r.metrics.hard_iou[0]),
                        opt(r.metrics.hard_iou[1]),
                    ]
                }),
            )?);
            out.push(write_csv(&dir.join("table.csv"), &["model", "mae", "iou", "tdr"], segmentation_table(report))?);
        }
    }
    Ok(out)
}

/// Median water-class MAE, IoU and TDR per segmentation model, followed by a
/// `delta` row (regression PiNet minus SegNet) when both are present.
pub fn segmentation_table(report: &ExperimentReport) -> Vec<Vec<String>> {
    let mut names: Vec<&str> = Vec::new();
    for r in &report.segmentation {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let stats = |name: &str| -> [f64; 3] {
        let rs: Vec<&SegReport> = report.seg_reports(name).collect();
        [
            median(rs.iter().map(|r| r.metrics.water_mae)).unwrap_or(f64::NAN),
            median(rs.iter().map(|r| r.water_iou())).unwrap_or(f64::NAN),
            median(rs.iter().map(|r| r.water_tdr())).unwrap_or(f64::NAN),
        ]
    };
    let row = |label: &str, s: [f64; 3]| vec![label.to_string(), s[0].to_string(), s[1].to_string(), s[2].to_string()];
    let mut rows: Vec<Vec<String>> = names.iter().map(|n| row(n, stats(n))).collect();
    if names.contains(&"segnet") && names.contains(&"pinet_regression") {
        let (a, b) = (stats("pinet_regression"), stats("segnet"));
        rows.push(row("delta", [a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
    }
    rows
}
