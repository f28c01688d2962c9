//! Raw numeric kernels behind the graph ops: im2col convolution, bilinear
//! resampling, channel softmax.

use crate::par;

/// Geometry of a 2-D convolution over one NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix (`in_ch * k * k`).
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Columns of the per-sample im2col matrix (`out_h * out_w`).
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit
/// row/column strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the strides above index within `a` (m x k), `b` (k x n) and
    // the row-major `c` (m x n); callers pass slices of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, oh*ow]` column matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ncols = oh * ow;
    for c in 0..g.in_ch {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
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

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image,
/// accumulating overlapping taps.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ncols = oh * ow;
    img.fill(0.0);
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns `(output, cols)`; `cols` holds the whole
/// batch's im2col matrices for reuse in the backward pass.
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * ncols;
    let mut cols = vec![0.0; g.batch * rows * ncols];
    par::for_each_chunk_mut(&mut cols, rows * ncols, |b, c| {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, c);
    });
    let mut out = vec![0.0; g.batch * out_sz];
    par::for_each_chunk_mut(&mut out, out_sz, |b, o| {
        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
        gemm(
            g.out_ch,
            rows,
            ncols,
            w,
            rows as isize,
            1,
            col,
            ncols as isize,
            1,
            0.0,
            o,
        );
        if let Some(bias) = bias {
            for (oc, chunk) in o.chunks_mut(ncols).enumerate() {
                let bv = bias[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    (out, cols)
}

/// Gradient w.r.t. the weights: `sum_b dout_b * cols_b^T`, reduced in
/// batch order.
pub fn conv2d_grad_weight(dout: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let out_sz = g.out_ch * ncols;
    let partials = par::map_range(g.batch, |b| {
        let mut dw = vec![0.0; g.out_ch * rows];
        gemm(
            g.out_ch,
            ncols,
            rows,
            &dout[b * out_sz..(b + 1) * out_sz],
            ncols as isize,
            1,
            &cols[b * rows * ncols..(b + 1) * rows * ncols],
            1,
            ncols as isize,
            0.0,
            &mut dw,
        );
        dw
    });
    let mut acc = vec![0.0; g.out_ch * rows];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d_grad_bias(dout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut db = vec![0.0; g.out_ch];
    for sample in dout.chunks(g.out_ch * ncols) {
        for (oc, chunk) in sample.chunks(ncols).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
    }
    db
}

/// Gradient w.r.t. the input: `col2im(w^T * dout_b)` per sample.
pub fn conv2d_grad_input(dout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * ncols;
    let mut dx = vec![0.0; g.batch * in_sz];
    par::for_each_chunk_mut(&mut dx, in_sz, |b, d| {
        let mut dcols = vec![0.0; rows * ncols];
        gemm(
            rows,
            g.out_ch,
            ncols,
            w,
            1,
            rows as isize,
            &dout[b * out_sz..(b + 1) * out_sz],
            ncols as isize,
            1,
            0.0,
            &mut dcols,
        );
        col2im(&dcols, g, d);
    });
    dx
}

/// Interpolation taps for resizing an axis of length `src` to `dst` with
/// half-pixel centres (`align_corners = false`). Each output index gets
/// `(i0, i1, w1)`; the value is `(1 - w1) * x[i0] + w1 * x[i1]`.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear resize of `planes` independent `[h, w]` planes to `[oh, ow]`.
pub fn bilinear_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |p, o| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = (1.0 - wx) * r0[x0] + wx * r0[x1];
                let bot = (1.0 - wx) * r1[x0] + wx * r1[x1];
                o[oy * ow + ox] = (1.0 - wy) * top + wy * bot;
            }
        }
    });
    out
}

/// Adjoint of [`bilinear_forward`].
pub fn bilinear_backward(dout: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |p, d| {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                d[y0 * w + x1] += (1.0 - wy) * wx * g;
                d[y1 * w + x0] += wy * (1.0 - wx) * g;
                d[y1 * w + x1] += wy * wx * g;
            }
        }
    });
    dx
}

/// Softmax (or log-softmax) over the channel axis of an NCHW buffer.
pub fn channel_softmax(x: &[f64], n: usize, c: usize, hw: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, c * hw, |b, o| {
        let src = &x[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(src[ch * hw + p]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                s += (src[ch * hw + p] - m).exp();
            }
            if log {
                let lse = m + s.ln();
                for ch in 0..c {
                    o[ch * hw + p] = src[ch * hw + p] - lse;
                }
            } else {
                for ch in 0..c {
                    o[ch * hw + p] = (src[ch * hw + p] - m).exp() / s;
                }
            }
        }
    });
    let _ = n;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            in_h: 7,
            in_w: 6,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
        let w: Vec<f64> = (0..4 * 27).map(|i| ((i * 13 % 7) as f64) * 0.2 - 0.6).collect();
        let bias = [0.1, -0.2, 0.3, 0.0];
        let (out, _) = conv2d_forward(&x, &w, Some(&bias), &g);
        let (oh, ow) = (g.out_h(), g.out_w());
        assert_eq!((oh, ow), (4, 3));
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias[o];
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                        s += w[((o * 3 + c) * 3 + ki) * 3 + kj]
                                            * x[((b * 3 + c) * 7 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = out[((b * 4 + o) * oh + oy) * ow + ox];
                        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            in_h: 5,
            in_w: 5,
            out_ch: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cx = vec![0.0; y.len()];
        im2col(&x, &g, &mut cx);
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &g, &mut aty);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(bilinear_forward(&x, 1, 4, 4, 4, 4), x);
        let c = vec![0.3; 9];
        for v in bilinear_forward(&c, 1, 3, 3, 12, 7) {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..2 * 7 * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let ax = bilinear_forward(&x, 2, 3, 4, 7, 9);
        let aty = bilinear_backward(&y, 2, 3, 4, 7, 9);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
