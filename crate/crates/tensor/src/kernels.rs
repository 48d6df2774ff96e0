//! Forward and adjoint kernels on raw NCHW buffers.
//!
//! Convolutions are lowered to `im2col` + GEMM. The column buffer is rebuilt
//! during the backward pass instead of being kept alive, which trades a cheap
//! copy for a large cut in peak memory.

use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tensor};

/// Geometry of a 2-D convolution on a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output-column range `[lo, hi)` for kernel column `kj` when stride is 1.
#[inline]
fn stride1_range(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.col_cols();
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * p);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = stride1_range(g, kj);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let off = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// [`im2col`] in pixel-major layout: `col[pixel][(c, ki, kj)]`. Weight
/// gradients read this as a row-major right-hand side, which packs much
/// faster than a transposed view of the channel-major layout. `scratch`
/// must hold `col_rows * col_cols` values.
pub fn im2col_t<T: Scalar>(x: &[T], g: &ConvGeom, scratch: &mut [T], col: &mut [T]) {
    im2col(x, g, scratch);
    transpose(scratch, g.col_rows(), g.col_cols(), col);
}

/// Out-of-place transpose of a row-major `rows x cols` matrix. Reads eight
/// source rows in lockstep so every store is a short contiguous run.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 8;
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    let full = rows / B * B;
    for r0 in (0..full).step_by(B) {
        let s: [&[T]; B] = std::array::from_fn(|j| &src[(r0 + j) * cols..(r0 + j + 1) * cols]);
        for c in 0..cols {
            let d = &mut dst[c * rows + r0..c * rows + r0 + B];
            for j in 0..B {
                d[j] = s[j][c];
            }
        }
    }
    for r in full..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.col_cols();
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * p);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = stride1_range(g, kj);
                        if hi > lo {
                            let off = lo + kj - g.pad;
                            for (d, &s) in dst[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b` with weight layout `[c_out, c_in, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, kh, kw) = w.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[n, co, g.ho, g.wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let wmat = MatRef::new(w.data(), co, k);
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let colref = if g.is_pointwise() {
            MatRef::new(xi, k, p)
        } else {
            im2col(xi, &g, &mut col);
            MatRef::new(&col, k, p)
        };
        let oi = &mut out.data_mut()[i * co * p..(i + 1) * co * p];
        gemm(T::one(), wmat, colref, T::zero(), oi);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data());
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &[T]) {
    let (n, c, h, w) = out.dims4();
    assert_eq!(bias.len(), c, "bias length must equal channel count");
    let hw = h * w;
    for i in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            let start = (i * c + ch) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v += bv;
            }
        }
    }
}

/// Sum of `dy` over batch and space for each channel.
pub fn channel_sums<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let start = (i * c + ch) * hw;
            *acc += dy.data()[start..start + hw].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], db)
}

/// Gradients of [`conv2d_forward`] with respect to `x` and `w`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
    let (k, p) = (g.col_rows(), g.col_cols());
    // Stride-1 square kernels: dx is a plain convolution of dy with the
    // flipped, channel-swapped kernel, which keeps the GEMM inner dimension
    // at c_out·k² instead of c_out.
    let dx_as_conv = need_dx && !g.is_pointwise() && stride == 1 && kh == kw && pad < kh;
    let mut dx = if dx_as_conv {
        let mut wf = vec![T::zero(); w.len()];
        for o in 0..co {
            for ci in 0..c {
                for a in 0..kh {
                    for b in 0..kw {
                        wf[((ci * co + o) * kh + a) * kw + b] = w.data()[((o * c + ci) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)];
                    }
                }
            }
        }
        let wf = Tensor::from_vec(&[c, co, kh, kw], wf);
        let dx = conv2d_forward(dy, &wf, None, 1, kh - 1 - pad);
        debug_assert_eq!(dx.shape(), x.shape());
        Some(dx)
    } else {
        need_dx.then(|| Tensor::zeros(x.shape()))
    };
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut colt = if need_dw { vec![T::zero(); k * p] } else { Vec::new() };
    let wmat = MatRef::new(w.data(), co, k);
    for i in 0..n {
        let dyi = MatRef::new(&dy.data()[i * co * p..(i + 1) * co * p], co, p);
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                transpose(xi, k, p, &mut colt);
            } else {
                im2col_t(xi, &g, &mut col, &mut colt);
            }
            gemm(T::one(), dyi, MatRef::new(&colt, p, k), T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut().filter(|_| !dx_as_conv) {
            let dxi = &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
            if g.is_pointwise() {
                gemm(T::one(), wmat.t(), dyi, T::zero(), dxi);
            } else {
                gemm(T::one(), wmat.t(), dyi, T::zero(), &mut col);
                col2im_add(&col, &g, dxi);
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution with weight layout `[c_in, c_out, kh, kw]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, kh, kw) = w.dims4();
    assert_eq!(ci, wci, "conv_transpose2d: input has {ci} channels, weight expects {wci}");
    assert!(out_pad < stride, "output padding must be smaller than the stride");
    let ho = (h - 1) * stride + kh + out_pad - 2 * pad;
    let wo = (wd - 1) * stride + kw + out_pad - 2 * pad;
    let g = ConvGeom::new(co, ho, wo, kh, kw, stride, pad);
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut col = vec![T::zero(); k * p];
    let wmat = MatRef::new(w.data(), ci, k);
    for i in 0..n {
        let xi = MatRef::new(&x.data()[i * ci * p..(i + 1) * ci * p], ci, p);
        gemm(T::one(), wmat.t(), xi, T::zero(), &mut col);
        let oi = &mut out.data_mut()[i * co * ho * wo..(i + 1) * co * ho * wo];
        col2im_add(&col, &g, oi);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data());
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, _, _) = x.dims4();
    let (_, co, kh, kw) = w.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let g = ConvGeom::new(co, ho, wo, kh, kw, stride, pad);
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); k * p];
    let mut colt = if need_dw { vec![T::zero(); k * p] } else { Vec::new() };
    let wmat = MatRef::new(w.data(), ci, k);
    for i in 0..n {
        let dyi = &dy.data()[i * co * ho * wo..(i + 1) * co * ho * wo];
        if let Some(dx) = dx.as_mut() {
            im2col(dyi, &g, &mut col);
            gemm(T::one(), wmat, MatRef::new(&col, k, p), T::zero(), &mut dx.data_mut()[i * ci * p..(i + 1) * ci * p]);
        }
        if let Some(dw) = dw.as_mut() {
            im2col_t(dyi, &g, &mut col, &mut colt);
            let xi = MatRef::new(&x.data()[i * ci * p..(i + 1) * ci * p], ci, p);
            gemm(T::one(), xi, MatRef::new(&colt, p, k), T::one(), dw.data_mut());
        }
    }
    (dx, dw)
}

/// Group normalization statistics and output. Returns `(y, mean, rstd)` with
/// one mean/rstd per `(sample, group)`.
pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
    let cg = c / groups;
    let hw = h * w;
    let count = T::from_usize(cg * hw).unwrap();
    let mut y = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for i in 0..n {
        for gi in 0..groups {
            let start = (i * c + gi * cg) * hw;
            let seg = &x.data()[start..start + cg * hw];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let off = start + cc * hw;
                let ys = &mut y.data_mut()[off..off + hw];
                for (yv, &xv) in ys.iter_mut().zip(&x.data()[off..off + hw]) {
                    *yv = (xv - mean) * rstd * ga + be;
                }
            }
        }
    }
    (y, means, rstds)
}

#[allow(clippy::type_complexity)]
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    means: &[T],
    rstds: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let hw = h * w;
    let count = T::from_usize(cg * hw).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = (means[i * groups + gi], rstds[i * groups + gi]);
            let start = (i * c + gi * cg) * hw;
            // Sums of dxhat and dxhat * xhat over the group.
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let off = start + cc * hw;
                let ga = gamma.data()[ch];
                let mut dg = T::zero();
                let mut db = T::zero();
                for (&xv, &g) in x.data()[off..off + hw].iter().zip(&dy.data()[off..off + hw]) {
                    let xhat = (xv - mean) * rstd;
                    dg += g * xhat;
                    db += g;
                    let dxhat = g * ga;
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += db;
            }
            let m1 = s1 / count;
            let m2 = s2 / count;
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let off = start + cc * hw;
                let ga = gamma.data()[ch];
                for j in off..off + hw {
                    let xhat = (x.data()[j] - mean) * rstd;
                    let dxhat = dy.data()[j] * ga;
                    dx.data_mut()[j] = rstd * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, Tensor::from_vec(&[c], dgamma), Tensor::from_vec(&[c], dbeta))
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), y.data_mut());
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let v = src[(p * h + i) * w + j];
                let base = (p * 2 * h + 2 * i) * 2 * w + 2 * j;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let (src, dst) = (dy.data(), dx.data_mut());
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let base = (p * h2 + 2 * i) * w2 + 2 * j;
                dst[(p * h + i) * w + j] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    dx
}

/// 2×2 mean pooling with stride 2; a trailing odd row or column is dropped.
pub fn avg_pool2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let (src, dst) = (x.data(), y.data_mut());
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let base = (p * h + 2 * i) * w + 2 * j;
                dst[(p * ho + i) * wo + j] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2x_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(in_shape);
    let (src, dst) = (dy.data(), dx.data_mut());
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let g = src[(p * ho + i) * wo + j] * quarter;
                let base = (p * h + 2 * i) * w + 2 * j;
                dst[base] += g;
                dst[base + 1] += g;
                dst[base + w] += g;
                dst[base + w + 1] += g;
            }
        }
    }
    dx
}

/// Batched matrix product on rank-3 tensors `[b, rows, cols]`, with
/// optional transposition of either operand.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ba, ar, ac) = dims3(a);
    let (bb, br, bc) = dims3(b);
    assert_eq!(ba, bb, "bmm batch mismatch");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, nn) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "bmm inner dimension mismatch");
    let mut out = Tensor::zeros(&[ba, m, nn]);
    for i in 0..ba {
        let mut am = MatRef::new(&a.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        let mut bm = MatRef::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        gemm(T::one(), am, bm, T::zero(), &mut out.data_mut()[i * m * nn..(i + 1) * m * nn]);
    }
    out
}

pub fn dims3<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected rank-3 tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax on rank-0 tensor");
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(d) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    y
}
