//! ToyShapes: grayscale images split into four quadrants, each of which may
//! hold one square, triangle or circle. The positive class is "at least one
//! triangle" and the ground-truth attribution map marks triangle pixels.

use std::fs;
use std::path::Path;

use pinet_tensor::{save_tensor, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, prng, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Triangle,
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub quadrant: usize,
    /// Top-left corner of the bounding box relative to the quadrant origin.
    pub offset: (usize, usize),
    pub size: usize,
    pub shade: f32,
    pub filled: bool,
    pub stroke_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyShapesConfig {
    pub image_size: usize,
    pub p_shape: f64,
    pub kinds: Vec<ShapeKind>,
    pub background_shade: (f32, f32),
    pub shape_shade: (f32, f32),
    pub size_range: (usize, usize),
    pub outlined_fraction: f64,
    pub stroke_range: (usize, usize),
    pub min_contrast: f32,
    /// Free pixels kept between a shape and its quadrant border.
    pub margin: usize,
    pub seed: u64,
}

impl Default for ToyShapesConfig {
    fn default() -> Self {
        ToyShapesConfig {
            image_size: 32,
            p_shape: 0.75,
            kinds: vec![ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Circle],
            background_shade: (0.0, 0.4),
            shape_shade: (0.6, 1.0),
            size_range: (8, 14),
            outlined_fraction: 0.25,
            stroke_range: (1, 2),
            min_contrast: 0.2,
            margin: 1,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 100;

impl ToyShapesConfig {
    pub fn quadrant_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(0.0..=1.0).contains(&self.p_shape) || !(0.0..=1.0).contains(&self.outlined_fraction) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return bad(format!("image_size {} must be even and at least 4", self.image_size));
        }
        if self.kinds.is_empty() {
            return bad("kinds must not be empty".into());
        }
        let ranges = [
            ("background_shade", self.background_shade),
            ("shape_shade", self.shape_shade),
        ];
        for (name, (lo, hi)) in ranges {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} ({lo}, {hi}) must be an ordered range inside [0, 1]"));
            }
        }
        let (smin, smax) = self.size_range;
        if smin < 2 || smin > smax {
            return bad(format!("size_range ({smin}, {smax}) is degenerate"));
        }
        if smax + 2 * self.margin > self.quadrant_size() {
            return bad(format!(
                "size {smax} with margin {} does not fit a {}-pixel quadrant",
                self.margin,
                self.quadrant_size()
            ));
        }
        let (wmin, wmax) = self.stroke_range;
        if wmin == 0 || wmin > wmax {
            return bad(format!("stroke_range ({wmin}, {wmax}) is degenerate"));
        }
        if !(0.0..=1.0).contains(&self.min_contrast) {
            return bad("min_contrast must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    /// `[1, H, W]` in [0, 1].
    pub image: Tensor,
    pub label: u8,
    /// `[H, W]` binary mask of triangle pixels.
    pub gt_map: Tensor,
    pub shapes: Vec<ShapeSpec>,
}

/// Pixels of the shape inside its own `size x size` box, as `(row, col)`.
fn local_pixels(kind: ShapeKind, size: usize, filled: bool, stroke: usize) -> Vec<(usize, usize)> {
    let s = size as f64;
    let w = stroke as f64;
    let c = (s - 1.0) / 2.0;
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            let keep = match kind {
                ShapeKind::Square => {
                    filled || y < stroke || x < stroke || y + stroke >= size || x + stroke >= size
                }
                ShapeKind::Circle => {
                    let d = ((yf - c).powi(2) + (xf - c).powi(2)).sqrt();
                    d <= c + 1e-9 && (filled || d > c - w + 1e-9)
                }
                ShapeKind::Triangle => {
                    // Upright isosceles: apex at (0, c), base along the last row.
                    let half = if size > 1 { yf / (s - 1.0) * c } else { 0.0 };
                    let inside = (xf - c).abs() <= half + 1e-9;
                    if !inside {
                        false
                    } else if filled {
                        true
                    } else {
                        let to_base = s - 1.0 - yf;
                        // Slanted sides pass through the apex (0, c) and the
                        // base corners (s-1, 0), (s-1, s-1).
                        let norm = ((s - 1.0).powi(2) + c * c).sqrt();
                        let to_side = ((s - 1.0) * (c - (xf - c).abs()) - c * (s - 1.0 - yf)).abs() / norm;
                        to_base.min(to_side) < w - 1e-9
                    }
                }
            };
            if keep {
                out.push((y, x));
            }
        }
    }
    out
}

/// Draws `spec` onto an `[H, W]` (or `[1, H, W]`) canvas and returns the
/// covered canvas coordinates.
pub fn rasterize_shape(spec: &ShapeSpec, canvas: &mut Tensor) -> Result<Vec<(usize, usize)>> {
    let shape = canvas.shape();
    let (h, w) = match shape {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(CoreError::Generation(format!("canvas shape {shape:?} is not a single plane"))),
    };
    if h != w || h % 2 != 0 || spec.quadrant > 3 {
        return Err(CoreError::Generation(format!(
            "quadrant {} on a {h}x{w} canvas",
            spec.quadrant
        )));
    }
    let q = h / 2;
    let (oy, ox) = spec.offset;
    if spec.size == 0 || oy + spec.size > q || ox + spec.size > q {
        return Err(CoreError::Generation(format!(
            "shape of size {} at offset {:?} leaves its {q}-pixel quadrant",
            spec.size, spec.offset
        )));
    }
    if !spec.filled && spec.stroke_width == 0 {
        return Err(CoreError::Generation("outlined shape needs a positive stroke".into()));
    }
    let base_y = (spec.quadrant / 2) * q + oy;
    let base_x = (spec.quadrant % 2) * q + ox;
    let covered: Vec<(usize, usize)> = local_pixels(spec.kind, spec.size, spec.filled, spec.stroke_width)
        .into_iter()
        .map(|(y, x)| (base_y + y, base_x + x))
        .collect();
    let data = canvas.data_mut();
    for &(y, x) in &covered {
        data[y * w + x] = spec.shade;
    }
    Ok(covered)
}

fn draw_shape(config: &ToyShapesConfig, quadrant: usize, background: f32, rng: &mut Prng) -> Result<ShapeSpec> {
    let q = config.quadrant_size();
    for _ in 0..MAX_ATTEMPTS {
        let kind = config.kinds[rng.random_range(0..config.kinds.len())];
        let size = rng.random_range(config.size_range.0..=config.size_range.1);
        let filled = !rng.random_bool(config.outlined_fraction);
        let stroke_width = if filled {
            0
        } else {
            rng.random_range(config.stroke_range.0..=config.stroke_range.1)
        };
        let (lo, hi) = config.shape_shade;
        let shade = lo + (hi - lo) * rng.random::<f32>();
        let span = q as isize - size as isize - 2 * config.margin as isize;
        if span < 0 {
            continue;
        }
        let oy = config.margin + rng.random_range(0..=span as usize);
        let ox = config.margin + rng.random_range(0..=span as usize);
        if (shade - background).abs() < config.min_contrast {
            continue;
        }
        return Ok(ShapeSpec {
            kind,
            quadrant,
            offset: (oy, ox),
            size,
            shade,
            filled,
            stroke_width,
        });
    }
    Err(CoreError::Generation(format!(
        "no valid shape for quadrant {quadrant} after {MAX_ATTEMPTS} attempts"
    )))
}

pub fn generate_example(config: &ToyShapesConfig, rng: &mut Prng) -> Result<LabeledExample> {
    config.validate()?;
    let n = config.image_size;
    let (lo, hi) = config.background_shade;
    let background = lo + (hi - lo) * rng.random::<f32>();
    let mut image = Tensor::full(&[1, n, n], background);
    let mut gt = vec![0.0f32; n * n];
    let mut shapes = Vec::new();
    for quadrant in 0..4 {
        if !rng.random_bool(config.p_shape) {
            continue;
        }
        let spec = draw_shape(config, quadrant, background, rng)?;
        let covered = rasterize_shape(&spec, &mut image)?;
        if spec.kind == ShapeKind::Triangle {
            for (y, x) in covered {
                gt[y * n + x] = 1.0;
            }
        }
        shapes.push(spec);
    }
    let label = u8::from(gt.iter().any(|&v| v > 0.0));
    Ok(LabeledExample {
        image,
        label,
        gt_map: Tensor::new(vec![n, n], gt)?,
        shapes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub positive_frequency: f64,
}

pub fn split_counts(n: usize, train_frac: f64, val_frac: f64) -> Result<(usize, usize, usize)> {
    if n == 0 {
        return Err(CoreError::Usage("dataset size must be positive".into()));
    }
    if train_frac < 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(CoreError::Usage(format!(
            "split fractions ({train_frac}, {val_frac}) must be non-negative and sum to at most 1"
        )));
    }
    let train = ((n as f64 * train_frac).round() as usize).min(n);
    let val = ((n as f64 * val_frac).round() as usize).min(n - train);
    Ok((train, val, n - train - val))
}

/// Generates `n` examples, example `i` from its own seed stream, and splits
/// them in order into train/val/test.
pub fn generate_dataset(config: &ToyShapesConfig, n: usize, split: (f64, f64)) -> Result<Dataset> {
    config.validate()?;
    let (n_train, n_val, _) = split_counts(n, split.0, split.1)?;
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = prng(derive_seed(config.seed, "toyshapes", i as u64));
        all.push(generate_example(config, &mut rng)?);
    }
    let positive_frequency = all.iter().filter(|e| e.label == 1).count() as f64 / n as f64;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset {
        train: all,
        val,
        test,
        positive_frequency,
    })
}

/// `(images [N,1,H,W], labels [N], gt maps [N,H,W])` for a slice of examples.
pub fn stack_examples(examples: &[LabeledExample]) -> Result<(Tensor, Tensor, Tensor)> {
    if examples.is_empty() {
        return Err(CoreError::Usage("cannot stack an empty example list".into()));
    }
    let images = Tensor::stack(&examples.iter().map(|e| &e.image).collect::<Vec<_>>())?;
    let labels = Tensor::new(vec![examples.len()], examples.iter().map(|e| e.label as f32).collect())?;
    let gts = Tensor::stack(&examples.iter().map(|e| &e.gt_map).collect::<Vec<_>>())?;
    Ok((images, labels, gts))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ToyShapesConfig,
    seed: u64,
    counts: SplitCounts,
    positive_frequency: f64,
}

#[derive(Serialize)]
struct SplitCounts {
    train: usize,
    val: usize,
    test: usize,
}

/// Writes `{split}_images.ptsr`, `{split}_labels.ptsr`, `{split}_gt.ptsr` for
/// every non-empty split plus `manifest.json`.
pub fn export_dataset(dir: &Path, config: &ToyShapesConfig, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        if split.is_empty() {
            continue;
        }
        let (images, labels, gts) = stack_examples(split)?;
        for (suffix, t) in [("images", &images), ("labels", &labels), ("gt", &gts)] {
            let path = dir.join(format!("{name}_{suffix}.ptsr"));
            save_tensor(&path, t).map_err(|e| match e {
                pinet_tensor::TensorError::Io(io) => CoreError::io(&path, io),
                other => other.into(),
            })?;
        }
    }
    let manifest = Manifest {
        config,
        seed: config.seed,
        counts: SplitCounts {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
        positive_frequency: data.positive_frequency,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(())
}
