//! Slice-level compute kernels behind the graph primitives.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample (ci, h, w) into a (ci*kh*kw, oh*ow) column matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.pad as isize;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = oy as isize + i as isize - p;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let xx = ox as isize + j as isize - p;
                        *o = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a (ci, h, w) sample.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.pad as isize;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = oy as isize + i as isize - p;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..ow {
                        let xx = ox as isize + j as isize - p;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.patch(), g.pixels());
    let mut out = vec![T::zero(); g.n * g.co * p];
    let mut cols = vec![T::zero(); k * p];
    let in_stride = g.ci * g.h * g.w;
    for s in 0..g.n {
        im2col(g, &x[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut out[s * g.co * p..(s + 1) * g.co * p];
        T::gemm(
            g.co,
            k,
            p,
            T::one(),
            w,
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            dst,
            p as isize,
            1,
        );
    }
    out
}

/// Returns (dx, dw); either may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.patch(), g.pixels());
    let in_stride = g.ci * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); k * p];
    for s in 0..g.n {
        let dys = &dy[s * g.co * p..(s + 1) * g.co * p];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[s * in_stride..(s + 1) * in_stride], &mut cols);
            // dw (co, k) += dy (co, p) @ cols^T (p, k)
            T::gemm(
                g.co,
                p,
                k,
                T::one(),
                dys,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // cols (k, p) = w^T (k, co) @ dy (co, p)
            T::gemm(
                k,
                g.co,
                p,
                T::one(),
                w,
                1,
                k as isize,
                dys,
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            col2im(g, &cols, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    (dx, dw)
}

/// Non-overlapping average pooling over (kh, kw) windows; `planes` = N*C.
pub(crate) fn avg_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::of((kh * kw) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for y in 0..h {
            let orow = &mut dst[(y / kh) * ow..(y / kh + 1) * ow];
            for xx in 0..w {
                orow[xx / kw] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::of((kh * kw) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / kh) * ow + xx / kw] * inv;
            }
        }
    }
    dx
}

/// Row-wise softmax of an (n, c) matrix.
pub(crate) fn softmax_rows<T: Real>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

pub(crate) fn log_softmax_rows<T: Real>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&s| (s - m).exp()).sum::<T>().ln() + m;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Per-channel layout of an (N, C, spatial...) buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelLayout {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn from_shape(shape: &[usize]) -> Self {
        Self {
            n: shape[0],
            c: shape[1],
            inner: shape[2..].iter().product(),
        }
    }

    pub fn count(&self) -> usize {
        self.n * self.inner
    }

    /// Calls `f(channel, flat index)` for every element in a fixed order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for s in 0..self.n {
            for ch in 0..self.c {
                let base = (s * self.c + ch) * self.inner;
                for i in base..base + self.inner {
                    f(ch, i);
                }
            }
        }
    }
}

/// Per-channel mean and biased variance.
pub(crate) fn channel_moments<T: Real>(x: &[T], lay: ChannelLayout) -> (Vec<T>, Vec<T>) {
    let cnt = T::of(lay.count() as f64);
    let mut mean = vec![T::zero(); lay.c];
    lay.for_each(|c, i| mean[c] += x[i]);
    mean.iter_mut().for_each(|m| *m /= cnt);
    let mut var = vec![T::zero(); lay.c];
    lay.for_each(|c, i| {
        let d = x[i] - mean[c];
        var[c] += d * d;
    });
    var.iter_mut().for_each(|v| *v /= cnt);
    (mean, var)
}

/// Normalizes with the given per-channel statistics and applies the affine map.
/// Returns (y, xhat).
pub(crate) fn bn_apply<T: Real>(
    x: &[T],
    lay: ChannelLayout,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    lay.for_each(|c, i| {
        let h = (x[i] - mean[c]) * inv_std[c];
        xhat[i] = h;
        y[i] = gamma[c] * h + beta[c];
    });
    (y, xhat)
}

/// Gradients of batch normalization; `batch_stats` selects whether the
/// statistics were computed from the batch itself (train) or held fixed (eval).
pub(crate) fn bn_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    lay: ChannelLayout,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); lay.c];
    let mut dbeta = vec![T::zero(); lay.c];
    lay.for_each(|c, i| {
        dbeta[c] += dy[i];
        dgamma[c] += dy[i] * xhat[i];
    });
    let mut dx = vec![T::zero(); dy.len()];
    if batch_stats {
        let m = T::of(lay.count() as f64);
        lay.for_each(|c, i| {
            dx[i] = gamma[c] * inv_std[c] / m * (m * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
        });
    } else {
        lay.for_each(|c, i| dx[i] = dy[i] * gamma[c] * inv_std[c]);
    }
    (dx, dgamma, dbeta)
}
