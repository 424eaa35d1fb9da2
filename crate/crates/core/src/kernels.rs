//! Slice-level numerical kernels shared by the tape ops and the eager API.
//!
//! All reductions run in index order so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major strided view: element `(r, c)` sits at `r * rs + c * cs`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

fn rows(data: &[f64], cols: usize) -> View<'_> {
    View {
        data,
        rs: cols as isize,
        cs: 1,
    }
}

fn cols_of(data: &[f64], cols: usize) -> View<'_> {
    View {
        data,
        rs: 1,
        cs: cols as isize,
    }
}

/// `c += a · b` with `a` of shape `n × k` and `b` of shape `k × m`; `c` is a
/// dense row-major `n × m` buffer.
fn gemm_acc(a: View, b: View, c: &mut [f64], n: usize, k: usize, m: usize) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= n * m);
    // SAFETY: the views cover `n × k` and `k × m` elements at the given
    // strides (checked by callers through slice lengths) and `c` holds n·m.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `(n × k) · (k × m)`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    assert!(a.len() >= n * k && b.len() >= k * m);
    let mut out = vec![0.0; n * m];
    gemm_acc(rows(a, k), rows(b, m), &mut out, n, k, m);
    out
}

/// Gradients of `C = A·B` given `dC`: returns `(dA, dB)`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert!(a.len() >= n * k && b.len() >= k * m && dc.len() >= n * m);
    let mut da = vec![0.0; n * k];
    let mut db = vec![0.0; k * m];
    gemm_acc(rows(dc, m), cols_of(b, m), &mut da, n, m, k);
    gemm_acc(cols_of(a, k), rows(dc, m), &mut db, k, n, m);
    (da, db)
}

pub fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a same-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dil_h: usize,
    pub dil_w: usize,
}

impl ConvGeom {
    fn pad_h(&self) -> isize {
        ((self.kh - 1) / 2 * self.dil_h) as isize
    }

    fn pad_w(&self) -> isize {
        ((self.kw - 1) / 2 * self.dil_w) as isize
    }

    /// Valid output range `[lo, hi)` along one axis for a tap at `offset`.
    fn span(offset: isize, len: usize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (len as isize - offset).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds `input` into a `(in_c·kh·kw) × (h·w)` matrix of shifted,
/// zero-padded planes.
fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut cols = vec![0.0; g.in_c * g.kh * g.kw * hw];
    for i in 0..g.in_c {
        let plane = &input[i * hw..(i + 1) * hw];
        for ky in 0..g.kh {
            let dy = (ky * g.dil_h) as isize - g.pad_h();
            let (y0, y1) = ConvGeom::span(dy, g.h);
            for kx in 0..g.kw {
                let dx = (kx * g.dil_w) as isize - g.pad_w();
                let (x0, x1) = ConvGeom::span(dx, g.w);
                if x0 == x1 {
                    continue;
                }
                let row = ((i * g.kh + ky) * g.kw + kx) * hw;
                for y in y0..y1 {
                    let s0 = (y as isize + dy) as usize * g.w + (x0 as isize + dx) as usize;
                    let d0 = row + y * g.w + x0;
                    cols[d0..d0 + (x1 - x0)].copy_from_slice(&plane[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.in_c * hw];
    for i in 0..g.in_c {
        let plane = &mut out[i * hw..(i + 1) * hw];
        for ky in 0..g.kh {
            let dy = (ky * g.dil_h) as isize - g.pad_h();
            let (y0, y1) = ConvGeom::span(dy, g.h);
            for kx in 0..g.kw {
                let dx = (kx * g.dil_w) as isize - g.pad_w();
                let (x0, x1) = ConvGeom::span(dx, g.w);
                if x0 == x1 {
                    continue;
                }
                let row = ((i * g.kh + ky) * g.kw + kx) * hw;
                for y in y0..y1 {
                    let s0 = (y as isize + dy) as usize * g.w + (x0 as isize + dx) as usize;
                    let d0 = row + y * g.w + x0;
                    for (p, c) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(&cols[d0..]) {
                        *p += c;
                    }
                }
            }
        }
    }
    out
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1
}

/// Zero-padded, stride-1 convolution; weight layout `(out_c, in_c, kh, kw)`.
pub fn conv2d(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let k = g.in_c * g.kh * g.kw;
    assert!(input.len() >= g.in_c * hw && weight.len() >= g.out_c * k);
    let mut out = vec![0.0; g.out_c * hw];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(bv);
        }
    }
    if is_pointwise(&g) {
        gemm_acc(rows(weight, k), rows(input, hw), &mut out, g.out_c, k, hw);
    } else {
        let cols = im2col(input, g);
        gemm_acc(rows(weight, k), rows(&cols, hw), &mut out, g.out_c, k, hw);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.h * g.w;
    let k = g.in_c * g.kh * g.kw;
    assert!(input.len() >= g.in_c * hw && weight.len() >= g.out_c * k);
    assert!(dout.len() >= g.out_c * hw);
    let db: Vec<f64> = (0..g.out_c)
        .map(|o| dout[o * hw..(o + 1) * hw].iter().sum())
        .collect();
    let owned;
    let cols: &[f64] = if is_pointwise(&g) {
        input
    } else {
        owned = im2col(input, g);
        &owned
    };
    let mut dw = vec![0.0; g.out_c * k];
    gemm_acc(rows(dout, hw), cols_of(cols, hw), &mut dw, g.out_c, hw, k);
    let mut dcols = vec![0.0; k * hw];
    gemm_acc(
        cols_of(weight, k),
        rows(dout, hw),
        &mut dcols,
        k,
        g.out_c,
        hw,
    );
    let din = if is_pointwise(&g) {
        dcols
    } else {
        col2im(&dcols, g)
    };
    (din, dw, db)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Row softmax with max subtraction, in place over rows of length `cols`.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Normalizes rows of length `cols`; returns `(x_hat, rstd)`.
pub fn layer_norm_rows(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; data.len()];
    let mut rstd = Vec::with_capacity(data.len() / cols);
    for (row, out) in data.chunks(cols).zip(xhat.chunks_mut(cols)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_span_clips_both_sides() {
        assert_eq!(ConvGeom::span(-3, 7), (3, 7));
        assert_eq!(ConvGeom::span(3, 7), (0, 4));
        assert_eq!(ConvGeom::span(9, 7), (0, 0));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }
}
