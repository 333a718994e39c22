//! Raw numeric kernels shared by the graph ops and by value-level helpers.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` with optional transposition of the row-major operands.
///
/// `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!(c.len(), m * n);
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the slice lengths were checked against the logical dimensions
    // and the strides above address exactly those elements.
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let spatial = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn col2im_add(g: &ConvGeometry, cols: &[f64], input_grad: &mut [f64]) {
    let spatial = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Align-corners interpolation taps `(lo, hi, frac)` mapping `out` samples
/// onto `len` input samples.
pub(crate) fn align_corner_taps(len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            if out == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (len - 1) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn check_upsample(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_upsample output size must be positive"));
    }
    if out_h < h || out_w < w {
        return Err(Error::invalid(format!(
            "bilinear_upsample only up-samples: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    Ok(())
}

pub(crate) fn upsample_forward(
    input: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = align_corner_taps(h, out_h);
    let tx = align_corner_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = input[y0 * w + x0] * (1.0 - fx) + input[y0 * w + x1] * fx;
            let bottom = input[y1 * w + x0] * (1.0 - fx) + input[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub(crate) fn upsample_backward(
    grad_out: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f64],
) {
    let ty = align_corner_taps(h, out_h);
    let tx = align_corner_taps(w, out_w);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = grad_out[oy * out_w + ox];
            grad_in[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            grad_in[y0 * w + x1] += g * (1.0 - fy) * fx;
            grad_in[y1 * w + x0] += g * fy * (1.0 - fx);
            grad_in[y1 * w + x1] += g * fy * fx;
        }
    }
}

/// Align-corners bilinear up-sampling of a `[H, W]` map.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::shape(format!(
            "bilinear_upsample expects [H, W], got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    check_upsample(h, w, out_h, out_w)?;
    Tensor::new(
        &[out_h, out_w],
        upsample_forward(map.data(), h, w, out_h, out_w),
    )
}

/// Four bilinear taps of one RoI sampling point over a feature plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub taps: [(usize, f64); 4],
}

impl RoiSample {
    /// Bilinear taps at continuous feature coordinates `(y, x)`, where
    /// integer coordinates address cell centres. Points are clamped to the
    /// plane.
    pub fn at(y: f64, x: f64, h: usize, w: usize) -> Self {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        RoiSample {
            taps: [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - e).abs() < 1e-12);
            }
        }
        // a stored transposed (3x2), b stored transposed (4x3)
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![1.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c2, 1.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x + 1.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_closed_form() {
        let map = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&map, 1, 4).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in up.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_rejects_downsampling_and_zero() {
        let map = Tensor::full(&[4, 4], 1.0);
        assert!(bilinear_upsample(&map, 2, 4).is_err());
        assert!(bilinear_upsample(&map, 0, 4).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let map = Tensor::new(&[2, 3], vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.7]).unwrap();
        assert_eq!(bilinear_upsample(&map, 2, 3).unwrap(), map);
        let c = Tensor::full(&[3, 3], 0.25);
        let up = bilinear_upsample(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn roi_sample_weights_sum_to_one() {
        let s = RoiSample::at(2.3, 5.9, 8, 8);
        let total: f64 = s.taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let edge = RoiSample::at(-3.0, 40.0, 8, 8);
        assert_eq!(edge.taps[0].0, 7);
    }
}
