//! Raw numeric kernels on flat row-major buffers. No tape, no allocation policy
//! beyond the returned buffers.

use rayon::prelude::*;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// `a_t` / `b_t` select the transposed view of a row-major buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major (or
    // transposed) layout of buffers of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution. `w` is `out_ch x in_ch x k x k`, `bias` has `out_ch` entries.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * p;
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xb)| {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            if g.is_pointwise() {
                gemm(g.out_ch, g.in_ch, p, 1.0, w, false, xb, false, 1.0, y);
            } else {
                let mut cols = vec![0.0; g.col_rows() * p];
                im2col(g, xb, &mut cols);
                gemm(g.out_ch, g.col_rows(), p, 1.0, w, false, &cols, false, 1.0, y);
            }
        });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Gradients of [`conv2d_forward`]. Per-element weight partials are summed in
/// batch order so the result does not depend on the thread count.
pub fn conv2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64], need_dx: bool) -> ConvGrads {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * p;
    let rows = g.col_rows();

    let partials: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            let mut dw = vec![0.0; g.out_ch * rows];
            let dx = if g.is_pointwise() {
                gemm(g.out_ch, p, rows, 1.0, dyb, false, xb, true, 0.0, &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![0.0; in_len];
                    gemm(rows, g.out_ch, p, 1.0, w, true, dyb, false, 0.0, &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![0.0; rows * p];
                im2col(g, xb, &mut cols);
                gemm(g.out_ch, p, rows, 1.0, dyb, false, &cols, true, 0.0, &mut dw);
                need_dx.then(|| {
                    gemm(rows, g.out_ch, p, 1.0, w, true, dyb, false, 0.0, &mut cols);
                    let mut dx = vec![0.0; in_len];
                    col2im(g, &cols, &mut dx);
                    dx
                })
            };
            (dw, dx)
        })
        .collect();

    let mut dw = vec![0.0; g.out_ch * rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_len));
    for (pdw, pdx) in partials {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend_from_slice(&pdx);
        }
    }
    let mut db = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for (o, acc) in db.iter_mut().enumerate() {
            let off = b * out_len + o * p;
            *acc += dy[off..off + p].iter().sum::<f64>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source index for cell-center nearest-neighbour subsampling along one axis.
pub fn nearest_source(i: usize, stride: usize, extent: usize) -> usize {
    let center = (i as f64 + 0.5) * stride as f64 - 0.5;
    (center.round() as usize).min(extent - 1)
}

/// Interpolation taps `(i0, i1, w0, w1)` for bilinear upsampling along one axis
/// (half-pixel centers, edge clamped).
pub fn bilinear_taps(out: usize, factor: usize, src_extent: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(src_extent - 1);
            let i1 = (i0 + 1).min(src_extent - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub const BN_EPS: f64 = 1e-5;

pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Biased variance (used for normalisation).
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn channel_stats(x: &[f64], b: usize, c: usize, hw: usize) -> BatchNormStats {
    let count = b * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            s += x[off..off + hw].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            ss += x[off..off + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    BatchNormStats { mean, var, count }
}
