//! Pixel-loop recomputation of the detection and overlap metrics.

use pinet_core::mars::{binarized_score, detection_metrics, detection_score, segmentation_metrics, AttributionBatch};
use pinet_core::rng::{prng, Prng};
use pinet_tensor::Tensor;
use rand::Rng;

const PAIRS: usize = 1000;
const SIDE: usize = 8;
pub const TOL: f64 = 1e-9;

fn random_pair(r: &mut Prng) -> (Vec<f32>, Vec<f32>) {
    let n = SIDE * SIDE;
    let density = match r.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => r.random::<f64>(),
    };
    let gt: Vec<f32> = (0..n).map(|_| if r.random_bool(density) { 1.0 } else { 0.0 }).collect();
    let binary = r.random_bool(0.3);
    let map: Vec<f32> = (0..n)
        .map(|_| {
            let v: f32 = r.random();
            if binary {
                v.round()
            } else {
                v
            }
        })
        .collect();
    (map, gt)
}

/// `(tdr, tar)` by counting pixels one at a time.
fn loop_rates(map: &[f32], gt: &[f32]) -> (Option<f64>, Option<f64>) {
    let (mut hit, mut pos, mut rej, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for d in 0..map.len() {
        if gt[d] == 1.0 {
            pos += 1.0;
            hit += map[d] as f64;
        } else {
            neg += 1.0;
            rej += 1.0 - map[d] as f64;
        }
    }
    ((pos > 0.0).then_some(hit / pos), (neg > 0.0).then_some(rej / neg))
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= TOL,
        (None, None) => true,
        _ => false,
    }
}

fn loop_score(maps: &[Vec<f32>], gts: &[Vec<f32>]) -> (f64, f64, f64) {
    let (mut st, mut nt, mut sa, mut na) = (0.0, 0, 0.0, 0);
    for (m, g) in maps.iter().zip(gts) {
        let (t, a) = loop_rates(m, g);
        if let Some(t) = t {
            st += t;
            nt += 1;
        }
        if let Some(a) = a {
            sa += a;
            na += 1;
        }
    }
    let mt = if nt > 0 { st / nt as f64 } else { 0.0 };
    let ma = if na > 0 { sa / na as f64 } else { 0.0 };
    (mt, ma, mt * ma)
}

/// Per-class soft IoU, hard IoU and TDR of one `[K, plane]` prediction.
fn loop_seg(pi: &[f32], gt: &[f32], k: usize) -> Vec<(Option<f64>, Option<f64>, Option<f64>)> {
    let plane = gt.len();
    (0..k)
        .map(|c| {
            let (mut inter, mut pred, mut truth, mut hi, mut hp) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for d in 0..plane {
                let p = pi[c * plane + d] as f64;
                let is_c = gt[d] as usize == c;
                let arg = (0..k).fold(0, |best, j| if pi[j * plane + d] > pi[best * plane + d] { j } else { best });
                pred += p;
                if is_c {
                    inter += p;
                    truth += 1.0;
                }
                if arg == c {
                    hp += 1.0;
                    if is_c {
                        hi += 1.0;
                    }
                }
            }
            let iou = |i: f64, p: f64| (truth > 0.0).then(|| if p + truth - i > 0.0 { i / (p + truth - i) } else { 0.0 });
            (iou(inter, pred), iou(hi, hp), (truth > 0.0).then(|| inter / truth))
        })
        .collect()
}

pub struct Outcome {
    pub mismatches: usize,
    pub compared: usize,
    pub bound_violations: usize,
}

pub fn run() -> Outcome {
    let r = &mut prng(2024);
    let mut out = Outcome {
        mismatches: 0,
        compared: 0,
        bound_violations: 0,
    };
    let (mut maps, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..PAIRS {
        let (m, g) = random_pair(r);
        let d = detection_metrics(&m, &g).unwrap();
        let (t, a) = loop_rates(&m, &g);
        out.compared += 2;
        out.mismatches += usize::from(!close(d.tdr, t)) + usize::from(!close(d.tar, a));
        maps.push(m);
        gts.push(g);
    }

    let flat = |v: &[Vec<f32>]| Tensor::new(vec![PAIRS, SIDE, SIDE], v.concat()).unwrap();
    let batch = AttributionBatch::new(flat(&maps), "random").unwrap();
    let gt_t = flat(&gts);
    let mut scores = vec![(detection_score(&batch, &gt_t).unwrap(), loop_score(&maps, &gts))];
    for t in [1e-4, 0.01, 0.25, 0.5, 0.9] {
        let bin: Vec<Vec<f32>> = maps.iter().map(|m| m.iter().map(|&v| if v as f64 > t { 1.0 } else { 0.0 }).collect()).collect();
        scores.push((binarized_score(&batch, &gt_t, t).unwrap(), loop_score(&bin, &gts)));
    }
    for (s, (mt, ma, sc)) in scores {
        out.compared += 3;
        out.mismatches += [(s.mean_tdr, mt), (s.mean_tar, ma), (s.score, sc)].iter().filter(|(x, y)| (x - y).abs() > TOL).count();
        if !s.bound_holds(s.score) {
            out.bound_violations += 1;
        }
    }

    let k = 3;
    for _ in 0..PAIRS {
        let logits: Vec<f32> = (0..k * SIDE * SIDE).map(|_| r.random_range(-2.0..2.0)).collect();
        let plane = SIDE * SIDE;
        let mut pi = logits.clone();
        for d in 0..plane {
            let z: f32 = (0..k).map(|c| logits[c * plane + d].exp()).sum();
            (0..k).for_each(|c| pi[c * plane + d] = logits[c * plane + d].exp() / z);
        }
        let gt: Vec<f32> = (0..plane).map(|_| r.random_range(0..k) as f32).collect();
        let m = segmentation_metrics(
            &Tensor::new(vec![k, SIDE, SIDE], pi.clone()).unwrap(),
            &Tensor::new(vec![SIDE, SIDE], gt.clone()).unwrap(),
            &[0.0; 3],
            &[0.0; 3],
        )
        .unwrap();
        for (c, (iou, hard, tdr)) in loop_seg(&pi, &gt, k).into_iter().enumerate() {
            out.compared += 3;
            out.mismatches += [(m.iou[c], iou), (m.hard_iou[c], hard), (m.tdr[c], tdr)].iter().filter(|(x, y)| !close(*x, *y)).count();
        }
    }
    out
}
