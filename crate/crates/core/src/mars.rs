//! Explanation quality measurements: detection rates against ground-truth
//! maps, threshold search and range analysis, recursive accuracy shift, and
//! segmentation overlap.

use log::warn;
use pinet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pinet::{accuracy, Predictor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionBatch {
    /// `[N, H, W]`
    pub maps: Tensor,
    pub normalized: bool,
    /// Set by normalization when every value is zero.
    pub all_zero: bool,
    pub source: String,
}

impl AttributionBatch {
    pub fn new(maps: Tensor, source: impl Into<String>) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(CoreError::Usage(format!("attribution maps must be [N, H, W], got {:?}", maps.shape())));
        }
        Ok(AttributionBatch {
            maps,
            normalized: false,
            all_zero: false,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map(&self, i: usize) -> &[f32] {
        self.maps.outer(i)
    }
}

/// Divides every map by the batch-wide maximum.
pub fn normalize_batch(batch: &AttributionBatch) -> Result<AttributionBatch> {
    let data = batch.maps.data();
    if let Some(v) = data.iter().find(|v| !(**v >= 0.0)) {
        return Err(CoreError::Usage(format!(
            "attribution value {v} is negative or NaN; rectify before normalizing"
        )));
    }
    let max = data.iter().copied().fold(0.0f32, f32::max);
    let mut out = batch.clone();
    out.normalized = true;
    if max == 0.0 {
        warn!("attribution batch {} is all zero; left unchanged", batch.source);
        out.all_zero = true;
        return Ok(out);
    }
    out.maps.data_mut().iter_mut().for_each(|v| *v /= max);
    Ok(out)
}

/// Detection rates of one map. A component is `None` when the ground truth
/// has no pixel of the class it measures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub tdr: Option<f64>,
    pub tar: Option<f64>,
}

pub fn detection_metrics(pi_hat: &[f32], gt: &[f32]) -> Result<Detection> {
    if pi_hat.len() != gt.len() {
        return Err(CoreError::Usage(format!("map has {} pixels, ground truth {}", pi_hat.len(), gt.len())));
    }
    let (mut hit, mut pos, mut rej, mut neg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pi_hat.iter().zip(gt) {
        let (p, g) = (p as f64, g as f64);
        hit += g * p;
        pos += g;
        rej += (1.0 - g) * (1.0 - p);
        neg += 1.0 - g;
    }
    Ok(Detection {
        tdr: (pos > 0.0).then(|| hit / pos),
        tar: (neg > 0.0).then(|| rej / neg),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub mean_tdr: f64,
    pub mean_tar: f64,
    pub score: f64,
    /// Instances contributing to each mean.
    pub n_tdr: usize,
    pub n_tar: usize,
}

impl DetectionScore {
    fn from_parts(tdr_sum: f64, n_tdr: usize, tar_sum: f64, n_tar: usize) -> Self {
        let mean_tdr = if n_tdr > 0 { tdr_sum / n_tdr as f64 } else { 0.0 };
        let mean_tar = if n_tar > 0 { tar_sum / n_tar as f64 } else { 0.0 };
        DetectionScore {
            mean_tdr,
            mean_tar,
            score: mean_tdr * mean_tar,
            n_tdr,
            n_tar,
        }
    }

    /// `score >= alpha` must imply both means `>= alpha`.
    pub fn bound_holds(&self, alpha: f64) -> bool {
        self.score < alpha || (self.mean_tdr >= alpha && self.mean_tar >= alpha)
    }
}

fn check_pair(batch: &AttributionBatch, gts: &Tensor) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::Usage("empty attribution batch".into()));
    }
    if batch.maps.shape() != gts.shape() {
        return Err(CoreError::Usage(format!(
            "maps {:?} and ground truth {:?} differ in shape",
            batch.maps.shape(),
            gts.shape()
        )));
    }
    Ok(())
}

/// Mean TDR times mean TAR on continuous maps.
pub fn detection_score(batch: &AttributionBatch, gts: &Tensor) -> Result<DetectionScore> {
    check_pair(batch, gts)?;
    let (mut tdr, mut n_tdr, mut tar, mut n_tar) = (0.0, 0, 0.0, 0);
    for i in 0..batch.len() {
        let d = detection_metrics(batch.map(i), gts.outer(i))?;
        if let Some(v) = d.tdr {
            tdr += v;
            n_tdr += 1;
        }
        if let Some(v) = d.tar {
            tar += v;
            n_tar += 1;
        }
    }
    Ok(DetectionScore::from_parts(tdr, n_tdr, tar, n_tar))
}

/// Detection score of the maps binarized as `pi_hat > t`.
pub fn binarized_score(batch: &AttributionBatch, gts: &Tensor, t: f64) -> Result<DetectionScore> {
    check_pair(batch, gts)?;
    let mut binary = batch.maps.clone();
    binary
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v as f64 > t { 1.0 } else { 0.0 });
    let b = AttributionBatch {
        maps: binary,
        ..batch.clone()
    };
    detection_score(&b, gts)
}

pub const GRID_POINTS: usize = 400;
pub const GRID_LO: f64 = 1e-4;
pub const GRID_HI: f64 = 1.0;

/// `n` thresholds evenly spaced in log10 between `lo` and `hi` inclusive.
pub fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

pub fn default_grid() -> Vec<f64> {
    log_grid(GRID_POINTS, GRID_LO, GRID_HI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub score: f64,
    pub tdr: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub best_threshold: f64,
    pub best: DetectionScore,
    pub curve: Vec<CurvePoint>,
}

/// Per-instance sorted pixel values, split by ground-truth class, so each
/// threshold costs two binary searches per instance.
struct SortedInstance {
    pos: Vec<f32>,
    neg: Vec<f32>,
}

fn count_above(sorted: &[f32], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v as f64 <= t)
}

/// Scores every grid threshold and returns the best (ties go to the
/// smallest threshold) with the full curve.
pub fn optimal_threshold(batch: &AttributionBatch, gts: &Tensor, grid: &[f64]) -> Result<ThresholdSearch> {
    check_pair(batch, gts)?;
    if grid.is_empty() {
        return Err(CoreError::Usage("empty threshold grid".into()));
    }
    let mut instances = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&p, &g) in batch.map(i).iter().zip(gts.outer(i)) {
            if g > 0.5 {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
        pos.sort_by(f32::total_cmp);
        neg.sort_by(f32::total_cmp);
        instances.push(SortedInstance { pos, neg });
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, DetectionScore)> = None;
    for &t in grid {
        let (mut tdr, mut n_tdr, mut tar, mut n_tar) = (0.0, 0, 0.0, 0);
        for inst in &instances {
            if !inst.pos.is_empty() {
                tdr += count_above(&inst.pos, t) as f64 / inst.pos.len() as f64;
                n_tdr += 1;
            }
            if !inst.neg.is_empty() {
                tar += (inst.neg.len() - count_above(&inst.neg, t)) as f64 / inst.neg.len() as f64;
                n_tar += 1;
            }
        }
        let s = DetectionScore::from_parts(tdr, n_tdr, tar, n_tar);
        curve.push(CurvePoint {
            threshold: t,
            score: s.score,
            tdr: s.mean_tdr,
            tar: s.mean_tar,
        });
        let better = match &best {
            None => true,
            Some((bt, bs)) => s.score > bs.score || (s.score == bs.score && t < *bt),
        };
        if better {
            best = Some((t, s));
        }
    }
    let (best_threshold, best) = best.expect("grid is non-empty");
    Ok(ThresholdSearch {
        best_threshold,
        best,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub xi: f64,
    /// Inclusive `[first, last]` thresholds of each contiguous run of grid
    /// points scoring at least `xi`.
    pub intervals: Vec<(f64, f64)>,
    /// Total width in log10 units; every satisfying grid point contributes
    /// one grid cell.
    pub log_measure: f64,
    pub do_not_use: bool,
}

pub const DEFAULT_XIS: [f64; 3] = [0.5, 0.75, 0.9];

/// Grid intervals where the score reaches `xi`. The curve must come from a
/// log-spaced grid.
pub fn threshold_range(curve: &[CurvePoint], xi: f64) -> Result<RangeReport> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(CoreError::Usage(format!("xi = {xi} outside [0, 1]")));
    }
    let cell = if curve.len() > 1 {
        (curve[curve.len() - 1].threshold.log10() - curve[0].threshold.log10()) / (curve.len() - 1) as f64
    } else {
        0.0
    };
    let mut intervals = Vec::new();
    let mut count = 0usize;
    let mut open: Option<f64> = None;
    let mut prev = 0.0;
    for p in curve {
        if p.score >= xi {
            count += 1;
            open.get_or_insert(p.threshold);
        } else if let Some(start) = open.take() {
            intervals.push((start, prev));
        }
        prev = p.threshold;
    }
    if let Some(start) = open {
        intervals.push((start, prev));
    }
    Ok(RangeReport {
        xi,
        do_not_use: intervals.is_empty(),
        log_measure: count as f64 * cell,
        intervals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursiveShift {
    pub acc: f64,
    pub acc_rec: f64,
    pub shift: f64,
    /// Accuracy of always predicting the majority class of `labels`.
    pub dominant_class_acc: f64,
}

/// Accuracy on `x` against accuracy on `pi_hat * x`, where `pi_hat` is the
/// normalized explanation of each item.
pub fn recursive_accuracy_shift<P: Predictor + ?Sized>(model: &P, batch: &AttributionBatch, images: &Tensor, labels: &[f32]) -> Result<RecursiveShift> {
    let n = batch.len();
    if images.rank() != 4 || images.shape()[0] != n || labels.len() != n {
        return Err(CoreError::Usage("images, maps and labels must hold the same items".into()));
    }
    if images.len() != batch.maps.len() * images.shape()[1] || images.shape()[1] != 1 {
        return Err(CoreError::Usage("maps must match single-channel images pixel for pixel".into()));
    }
    let filtered = Tensor::new(
        images.shape().to_vec(),
        images.data().iter().zip(batch.maps.data()).map(|(x, p)| x * p).collect(),
    )?;
    let acc = accuracy(&model.predict_logits(images)?, labels);
    let acc_rec = accuracy(&model.predict_logits(&filtered)?, labels);
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as f64 / n.max(1) as f64;
    Ok(RecursiveShift {
        acc,
        acc_rec,
        shift: acc_rec - acc,
        dominant_class_acc: pos.max(1.0 - pos),
    })
}

/// Per-class overlap, detection rate, and water surface error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// Soft IoU per class.
    pub iou: Vec<Option<f64>>,
    /// IoU of the argmax labelling per class.
    pub hard_iou: Vec<Option<f64>>,
    pub tdr: Vec<Option<f64>>,
    pub water_mae: f64,
}

/// Sums that make up the per-class metrics, accumulated over many images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentationTally {
    inter: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
    hard_inter: Vec<f64>,
    hard_pred: Vec<f64>,
    abs_err: f64,
    items: usize,
}

pub const WATER: usize = 2;

impl SegmentationTally {
    pub fn new(k: usize) -> Self {
        SegmentationTally {
            inter: vec![0.0; k],
            pred: vec![0.0; k],
            truth: vec![0.0; k],
            hard_inter: vec![0.0; k],
            hard_pred: vec![0.0; k],
            abs_err: 0.0,
            items: 0,
        }
    }

    /// Adds one image: `pi` is `[K, H, W]` (or `[K * H * W]` flat) class
    /// probabilities, `gt` holds class indices.
    pub fn add(&mut self, pi: &[f32], gt: &[f32], y_hat: &[f64], y: &[f64]) -> Result<()> {
        let k = self.inter.len();
        let plane = gt.len();
        if pi.len() != k * plane || y_hat.len() != k || y.len() != k {
            return Err(CoreError::Usage(format!(
                "expected {k} class planes of {plane} pixels and {k} surfaces"
            )));
        }
        for d in 0..plane {
            let cls = gt[d];
            if cls < 0.0 || cls as usize >= k || cls.fract() != 0.0 {
                return Err(CoreError::Usage(format!("class index {cls} outside 0..{k}")));
            }
            let cls = cls as usize;
            // Ties resolve to the lowest class index.
            let mut arg = 0;
            for c in 1..k {
                if pi[c * plane + d] > pi[arg * plane + d] {
                    arg = c;
                }
            }
            self.hard_pred[arg] += 1.0;
            if arg == cls {
                self.hard_inter[cls] += 1.0;
            }
            for c in 0..k {
                let p = pi[c * plane + d] as f64;
                self.pred[c] += p;
                if c == cls {
                    self.inter[c] += p;
                    self.truth[c] += 1.0;
                }
            }
        }
        self.abs_err += (y_hat[WATER.min(k - 1)] - y[WATER.min(k - 1)]).abs();
        self.items += 1;
        Ok(())
    }

    pub fn finish(&self) -> SegmentationMetrics {
        let k = self.inter.len();
        let ratio = |i: f64, p: f64, t: f64| {
            let union = p + t - i;
            (t > 0.0).then(|| if union > 0.0 { i / union } else { 0.0 })
        };
        SegmentationMetrics {
            iou: (0..k).map(|c| ratio(self.inter[c], self.pred[c], self.truth[c])).collect(),
            hard_iou: (0..k).map(|c| ratio(self.hard_inter[c], self.hard_pred[c], self.truth[c])).collect(),
            tdr: (0..k).map(|c| (self.truth[c] > 0.0).then(|| self.inter[c] / self.truth[c])).collect(),
            water_mae: if self.items > 0 { self.abs_err / self.items as f64 } else { 0.0 },
        }
    }
}

/// Metrics of a single image; classes absent from `gt` are `None`.
pub fn segmentation_metrics(pi: &Tensor, gt: &Tensor, y_hat: &[f64], y: &[f64]) -> Result<SegmentationMetrics> {
    let k = match pi.shape() {
        [k, h, w] if gt.shape() == [*h, *w] => *k,
        _ => {
            return Err(CoreError::Usage(format!(
                "maps {:?} do not match ground truth {:?}",
                pi.shape(),
                gt.shape()
            )))
        }
    };
    let mut tally = SegmentationTally::new(k);
    tally.add(pi.data(), gt.data(), y_hat, y)?;
    Ok(tally.finish())
}
