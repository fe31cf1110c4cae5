use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Bilinear resize of the two trailing axes with half-pixel centres
/// (align-corners = false). Leading axes are treated as a batch.
pub fn upsample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(TensorError::Rank {
            op: "upsample_bilinear",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::Usage("upsample_bilinear: empty spatial extent".into()));
    }
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let planes = input.len() / (h * w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([out_h, out_w]);
    Tensor::new(out_shape, out)
}

fn taps(len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}
