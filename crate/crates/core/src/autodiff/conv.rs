//! im2col + GEMM kernels for 2-D cross-correlation.
//!
//! All routines work one sample at a time. Per-sample weight gradients are
//! reduced in sample order, so results do not depend on the thread count.

use crate::error::{invalid, Result};

/// Zero padding mode for [`conv2d`](super::Tape::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad so that stride-1 output keeps the input size. Odd kernels pad
    /// `(k-1)/2` on both sides; even kernels pad `k/2 - 1` before and `k/2`
    /// after.
    Same,
    Valid,
}

impl Padding {
    pub(crate) fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Same => ((k - 1) / 2, k / 2),
            Padding::Valid => (0, 0),
        }
    }
}

/// Shape bookkeeping shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize, usize),
        weight: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = input;
        let [c_out, wc_in, kh, kw] = weight[..] else {
            return invalid(format!("conv weight must be 4-D, got {weight:?}"));
        };
        if kh != kw {
            return invalid(format!("only square kernels are supported, got {kh}x{kw}"));
        }
        if wc_in != c_in {
            return invalid(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            ));
        }
        if stride == 0 {
            return invalid("conv stride must be positive");
        }
        let (before, after) = padding.amounts(kh);
        if h + before + after < kh || w + before + after < kw {
            return invalid(format!("input {h}x{w} smaller than kernel {kh}x{kw}"));
        }
        let h_out = (h + before + after - kh) / stride + 1;
        let w_out = (w + before + after - kw) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad_top: before,
            pad_left: before,
            h_out,
            w_out,
        })
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    /// 1x1, stride 1, unpadded: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0
    }
}

/// `C = A B` (+ `C` when `accumulate`), with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(k == 0 || last(rsa, csa, m, k) < a.len());
    assert!(k == 0 || last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, csc, m, n) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p_len = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let dst = &mut cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + a) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + b) as isize - g.pad_left as isize;
                        *v = if ix >= 0 && (ix as usize) < g.w {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p_len = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src = &cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + a) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + b) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x` into `scratch` unless the conv is pointwise, in which case the
/// input is used directly.
fn columns<'a>(x: &'a [f64], g: &ConvGeometry, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    if g.is_pointwise() {
        x
    } else {
        scratch.resize(g.patch_len() * g.out_pixels(), 0.0);
        im2col(x, g, scratch);
        scratch
    }
}

fn forward_sample(
    x: &[f64],
    weight: &[f64],
    g: &ConvGeometry,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let p_len = g.out_pixels();
    let r = g.patch_len();
    let cols = columns(x, g, scratch);
    // out^T (P x c_out) = cols^T (P x R) * W^T (R x c_out); the tall
    // orientation keeps the GEMM micro-kernel busy for narrow layers.
    gemm(
        p_len,
        r,
        g.c_out,
        cols,
        (1, p_len),
        weight,
        (1, r),
        out,
        (1, p_len),
        false,
    );
}

fn weight_grad_sample(
    x: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    dw: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let p_len = g.out_pixels();
    let r = g.patch_len();
    let cols = columns(x, g, scratch);
    // dW^T (R x c_out) = cols (R x P) * dY^T (P x c_out)
    gemm(
        r,
        p_len,
        g.c_out,
        cols,
        (p_len, 1),
        dy,
        (1, p_len),
        dw,
        (1, r),
        true,
    );
}

fn input_grad_sample(
    dy: &[f64],
    weight: &[f64],
    g: &ConvGeometry,
    dx: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let p_len = g.out_pixels();
    let r = g.patch_len();
    if g.is_pointwise() {
        // dX (c_in x P) = W^T (c_in x c_out) * dY (c_out x P)
        gemm(
            r,
            g.c_out,
            p_len,
            weight,
            (1, r),
            dy,
            (p_len, 1),
            dx,
            (p_len, 1),
            true,
        );
        return;
    }
    scratch.resize(r * p_len, 0.0);
    gemm(
        r,
        g.c_out,
        p_len,
        weight,
        (1, r),
        dy,
        (p_len, 1),
        scratch,
        (p_len, 1),
        false,
    );
    col2im(scratch, g, dx);
}

#[cfg(feature = "parallel")]
mod exec {
    use rayon::prelude::*;

    pub fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64], &mut Vec<f64>) + Sync,
    {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each_init(Vec::new, |scratch, (i, c)| f(i, c, scratch));
    }

    pub fn map_samples<F>(n: usize, f: F) -> Vec<Vec<f64>>
    where
        F: Fn(usize, &mut Vec<f64>) -> Vec<f64> + Sync,
    {
        (0..n)
            .into_par_iter()
            .map_init(Vec::new, |scratch, i| f(i, scratch))
            .collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod exec {
    pub fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64], &mut Vec<f64>),
    {
        let mut scratch = Vec::new();
        for (i, c) in buf.chunks_mut(chunk).enumerate() {
            f(i, c, &mut scratch);
        }
    }

    pub fn map_samples<F>(n: usize, f: F) -> Vec<Vec<f64>>
    where
        F: Fn(usize, &mut Vec<f64>) -> Vec<f64>,
    {
        let mut scratch = Vec::new();
        (0..n).map(|i| f(i, &mut scratch)).collect()
    }
}

/// Cross-correlation of a whole batch plus optional per-channel bias.
pub(crate) fn forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let (in_len, p_len) = (g.in_len(), g.out_pixels());
    exec::for_each_chunk(&mut out, g.out_len(), |n, y, scratch| {
        forward_sample(&x[n * in_len..(n + 1) * in_len], weight, g, y, scratch);
        if let Some(b) = bias {
            for (o, plane) in y.chunks_mut(p_len).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

/// Gradient with respect to the input, accumulated into `dx`.
pub(crate) fn input_grad(dy: &[f64], weight: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let out_len = g.out_len();
    exec::for_each_chunk(dx, g.in_len(), |n, dxs, scratch| {
        input_grad_sample(&dy[n * out_len..(n + 1) * out_len], weight, g, dxs, scratch);
    });
}

/// Gradient with respect to the weights, summed over the batch in order.
pub(crate) fn weight_grad(x: &[f64], dy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let per_sample = exec::map_samples(g.batch, |n, scratch| {
        let mut dw = vec![0.0; g.weight_len()];
        weight_grad_sample(
            &x[n * in_len..(n + 1) * in_len],
            &dy[n * out_len..(n + 1) * out_len],
            g,
            &mut dw,
            scratch,
        );
        dw
    });
    let mut total = vec![0.0; g.weight_len()];
    for dw in &per_sample {
        total.iter_mut().zip(dw).for_each(|(t, v)| *t += v);
    }
    total
}

pub(crate) fn bias_grad(dy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p_len = g.out_pixels();
    let mut db = vec![0.0; g.c_out];
    for sample in dy.chunks(g.out_len()) {
        for (o, plane) in sample.chunks(p_len).enumerate() {
            db[o] += plane.iter().sum::<f64>();
        }
    }
    db
}
