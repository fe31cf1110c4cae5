//! Raw slice kernels: small GEMMs, im2col/col2im and the convolution
//! passes built on them. Everything here works on row-major `f32` buffers.

/// `c += op(a) * op(b)` through `matrixmultiply`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], (rsa, csa): (isize, isize), b: &[f32], (rsb, csb): (isize, isize), c: &mut [f32]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the callers check that `a`, `b` and `c` hold exactly the
    // elements addressed by these shapes and strides, and `c` is not aliased.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    sgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    sgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c);
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    sgemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c);
}

/// Geometry of a forward convolution from `(c_in, h, w)` to `(c_out, oh, ow)`.
/// A transposed convolution reuses the same geometry with the roles of the
/// two sides swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

/// Unfolds one `(c_in, h, w)` image into a `(c_in*k*k, oh*ow)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p_count = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p_count..(row + 1) * p_count];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back onto an image.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let p_count = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p_count..(row + 1) * p_count];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `kernel` is `(c_out, c_in, k, k)`.
pub(crate) fn conv_forward(n: usize, g: &ConvGeom, x: &[f32], kernel: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; n * g.out_len()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..n {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
        let o = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(bias) = bias {
            for (f, chunk) in o.chunks_mut(g.col_cols()).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        gemm_nn(g.c_out, g.col_rows(), g.col_cols(), kernel, &col, o);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

/// Gradients of [`conv_forward`] given the upstream gradient `dy`.
pub(crate) fn conv_backward(
    n: usize,
    g: &ConvGeom,
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_x, want_k, want_b) = want;
    let mut dx = want_x.then(|| vec![0.0; n * g.in_len()]);
    let mut dk = want_k.then(|| vec![0.0; kernel.len()]);
    let mut db = want_b.then(|| vec![0.0; g.c_out]);
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..n {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(db) = db.as_mut() {
            for (f, chunk) in dyb.chunks(g.col_cols()).enumerate() {
                db[f] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
            gemm_nt(g.c_out, g.col_cols(), g.col_rows(), dyb, &col, dk);
        }
        if let Some(dx) = dx.as_mut() {
            col.fill(0.0);
            gemm_tn(g.col_rows(), g.c_out, g.col_cols(), kernel, dyb, &mut col);
            col2im(&col, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Transposed convolution: maps `(c_out, oh, ow)` inputs to `(c_in, h, w)`
/// outputs under geometry `g`, i.e. the adjoint of [`conv_forward`].
/// `bias` has `c_in` entries.
pub(crate) fn conv_t_forward(n: usize, g: &ConvGeom, x: &[f32], kernel: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; n * g.in_len()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let plane = g.h * g.w;
    for b in 0..n {
        col.fill(0.0);
        gemm_tn(g.col_rows(), g.c_out, g.col_cols(), kernel, &x[b * g.out_len()..(b + 1) * g.out_len()], &mut col);
        let o = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
        col2im(&col, g, o);
        if let Some(bias) = bias {
            for (c, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

pub(crate) fn conv_t_backward(
    n: usize,
    g: &ConvGeom,
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_x, want_k, want_b) = want;
    let mut dx = want_x.then(|| vec![0.0; n * g.out_len()]);
    let mut dk = want_k.then(|| vec![0.0; kernel.len()]);
    let mut db = want_b.then(|| vec![0.0; g.c_in]);
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let plane = g.h * g.w;
    for b in 0..n {
        let dyb = &dy[b * g.in_len()..(b + 1) * g.in_len()];
        if let Some(db) = db.as_mut() {
            for (c, chunk) in dyb.chunks(plane).enumerate() {
                db[c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if dx.is_none() && dk.is_none() {
            continue;
        }
        im2col(dyb, g, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm_nn(g.c_out, g.col_rows(), g.col_cols(), kernel, &col, &mut dx[b * g.out_len()..(b + 1) * g.out_len()]);
        }
        if let Some(dk) = dk.as_mut() {
            gemm_nt(g.c_out, g.col_cols(), g.col_rows(), &x[b * g.out_len()..(b + 1) * g.out_len()], &col, dk);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}
