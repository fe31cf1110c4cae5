#![allow(dead_code)]

use pinet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

pub fn rng(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Pcg32, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direct cross-correlation, one output element at a time.
pub fn conv2d_loops(x: &Tensor, k: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [f, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0f64; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kd[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Transposed convolution as a scatter of every input element.
pub fn conv2d_transposed_loops(x: &Tensor, k: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
    let [n, f, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [_, c, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0f64; n * c * oh * ow];
    for bi in 0..n {
        for ci in 0..c {
            for p in 0..oh * ow {
                out[(bi * c + ci) * oh * ow + p] = b[ci] as f64;
            }
        }
        for fi in 0..f {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x.data()[((bi * f + fi) * h + iy) * w + ix] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let kv = k.data()[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                                out[((bi * c + ci) * oh + oy as usize) * ow + ox as usize] += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
