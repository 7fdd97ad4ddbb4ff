//! Slice-level kernels shared by the tape ops. No shape validation here; the
//! callers in `tape` check geometry before dispatching.

use super::Real;

/// Row-major `c (+)= op(a)·op(b)`; `a` is m×k (k×m if `ta`), `b` is k×n
/// (n×k if `tb`), `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Geometry of a square-kernel 2D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if span_h < kernel || span_w < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_identity(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `img` (C×H×W) into a (C·r·r)×(H'·W') column matrix.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_identity() {
        return img.to_vec();
    }
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let plane = g.in_h * g.in_w;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    if g.is_identity() {
        img.iter_mut().zip(col).for_each(|(a, &b)| *a = *a + b);
        return;
    }
    let plane = g.in_h * g.in_w;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            let d = &mut dst_row[ix as usize];
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// One bilinear corner: flat index into an H×W plane, its weight, and the
/// weight's derivatives with respect to the sample row and column.
#[derive(Clone, Copy, Debug)]
pub struct Corner<T> {
    pub idx: usize,
    pub w: T,
    pub dw_dr: T,
    pub dw_dc: T,
}

/// In-bounds corners of the sample point `(r, c)` on an `h`×`w` grid, with
/// weights `G(k_r, r)·G(k_c, c)`, `G(a, b) = max(0, 1 - |a - b|)`.
/// Out-of-bounds corners are dropped, which is sampling a zero-padded map.
#[inline]
pub fn bilinear_corners<T: Real>(r: T, c: T, h: usize, w: usize, out: &mut [Corner<T>; 4]) -> usize {
    let one = T::one();
    let r0f = r.floor();
    let c0f = c.floor();
    let fr = r - r0f;
    let fc = c - c0f;
    let r0 = r0f.to_f64() as i64;
    let c0 = c0f.to_f64() as i64;
    let cand = [
        (r0, c0, (one - fr) * (one - fc), -(one - fc), -(one - fr)),
        (r0, c0 + 1, (one - fr) * fc, -fc, one - fr),
        (r0 + 1, c0, fr * (one - fc), one - fc, -fr),
        (r0 + 1, c0 + 1, fr * fc, fc, fr),
    ];
    let mut n = 0;
    for (y, x, wt, dr, dc) in cand {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            out[n] = Corner {
                idx: y as usize * w + x as usize,
                w: wt,
                dw_dr: dr,
                dw_dc: dc,
            };
            n += 1;
        }
    }
    n
}

/// Deformable unfold: like [`im2col`] at stride 1 with "same" padding, but
/// tap `m` of query `q` samples `img` at `q + p_m + Δp_m` bilinearly.
/// `offsets` is (2·r²)×H×W with channel `2m` the row and `2m+1` the column
/// offset of tap `m`.
pub fn deform_im2col<T: Real>(img: &[T], offsets: &[T], c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let hw = h * w;
    let taps = r * r;
    let half = (r / 2) as f64;
    let mut col = vec![T::zero(); c * taps * hw];
    let mut corners = [Corner {
        idx: 0,
        w: T::zero(),
        dw_dr: T::zero(),
        dw_dc: T::zero(),
    }; 4];
    for m in 0..taps {
        let (ki, kj) = (m / r, m % r);
        let off_r = &offsets[2 * m * hw..(2 * m + 1) * hw];
        let off_c = &offsets[(2 * m + 1) * hw..(2 * m + 2) * hw];
        for q in 0..hw {
            let (qy, qx) = (q / w, q % w);
            let pr = T::from_f64(qy as f64 + ki as f64 - half) + off_r[q];
            let pc = T::from_f64(qx as f64 + kj as f64 - half) + off_c[q];
            let n = bilinear_corners(pr, pc, h, w, &mut corners);
            for ch in 0..c {
                let plane = &img[ch * hw..(ch + 1) * hw];
                let mut v = T::zero();
                for k in &corners[..n] {
                    v = v + k.w * plane[k.idx];
                }
                col[(ch * taps + m) * hw + q] = v;
            }
        }
    }
    col
}

/// Backward of [`deform_im2col`]: accumulates into `d_img` and `d_offsets`.
#[allow(clippy::too_many_arguments)]
pub fn deform_col2im<T: Real>(
    d_col: &[T],
    img: &[T],
    offsets: &[T],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    d_img: Option<&mut [T]>,
    d_offsets: Option<&mut [T]>,
) {
    let hw = h * w;
    let taps = r * r;
    let half = (r / 2) as f64;
    let mut corners = [Corner {
        idx: 0,
        w: T::zero(),
        dw_dr: T::zero(),
        dw_dc: T::zero(),
    }; 4];
    let mut d_img = d_img;
    let mut d_offsets = d_offsets;
    for m in 0..taps {
        let (ki, kj) = (m / r, m % r);
        for q in 0..hw {
            let (qy, qx) = (q / w, q % w);
            let pr = T::from_f64(qy as f64 + ki as f64 - half) + offsets[2 * m * hw + q];
            let pc = T::from_f64(qx as f64 + kj as f64 - half) + offsets[(2 * m + 1) * hw + q];
            let n = bilinear_corners(pr, pc, h, w, &mut corners);
            let mut gr = T::zero();
            let mut gc = T::zero();
            for ch in 0..c {
                let g = d_col[(ch * taps + m) * hw + q];
                if g == T::zero() {
                    continue;
                }
                let plane = ch * hw;
                for k in &corners[..n] {
                    if let Some(di) = d_img.as_deref_mut() {
                        di[plane + k.idx] = di[plane + k.idx] + g * k.w;
                    }
                    let v = img[plane + k.idx];
                    gr = gr + g * v * k.dw_dr;
                    gc = gc + g * v * k.dw_dc;
                }
            }
            if let Some(dof) = d_offsets.as_deref_mut() {
                dof[2 * m * hw + q] = dof[2 * m * hw + q] + gr;
                dof[(2 * m + 1) * hw + q] = dof[(2 * m + 1) * hw + q] + gc;
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
