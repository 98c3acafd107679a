//! Raw NCHW kernels on flat slices. The autodiff tape wraps these; nothing here allocates
//! gradients or knows about graphs.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// "Same" padding for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            pad_h: dilation * (kh - 1) / 2,
            pad_w: dilation * (kw - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let eh = self.dilation * (kh - 1) + 1;
        let ew = self.dilation * (kw - 1) + 1;
        if h + 2 * self.pad_h < eh || w + 2 * self.pad_w < ew || self.stride == 0 {
            return None;
        }
        Some((
            (h + 2 * self.pad_h - eh) / self.stride + 1,
            (w + 2 * self.pad_w - ew) / self.stride + 1,
        ))
    }
}

/// Output extent of a stride-`s` window op with kernel 3 and padding 1 (also of a plain
/// stride-`s` subsample).
pub fn strided_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Range of output columns `o` with `0 <= o*stride + offset < in_len`.
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out_len);
    let lo = lo as usize;
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    xd: [usize; 4],
    w: &[T],
    wd: [usize; 4],
    g: ConvGeom,
) -> (Vec<T>, [usize; 4]) {
    let [n, cin, h, wid] = xd;
    let [cout, cpg, kh, kw] = wd;
    let (oh, ow) = g.out_hw(h, wid, kh, kw).expect("conv geometry checked by caller");
    let opg = cout / g.groups;
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let s = g.stride;
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let o_off = (b * cout + oc) * oh * ow;
            for icg in 0..cpg {
                let ic = grp * cpg + icg;
                let i_off = (b * cin + ic) * h * wid;
                for ki in 0..kh {
                    let dy = (ki * g.dilation) as isize - g.pad_h as isize;
                    let (y0, y1) = valid_range(dy, s, h, oh);
                    for kj in 0..kw {
                        let dx = (kj * g.dilation) as isize - g.pad_w as isize;
                        let (x0, x1) = valid_range(dx, s, wid, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[((oc * cpg + icg) * kh + ki) * kw + kj];
                        for oy in y0..y1 {
                            let iy = ((oy * s) as isize + dy) as usize;
                            let orow = &mut out[o_off + oy * ow..o_off + (oy + 1) * ow];
                            let irow = &x[i_off + iy * wid..i_off + (iy + 1) * wid];
                            if s == 1 {
                                let ix0 = (x0 as isize + dx) as usize;
                                for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * s) as isize + dx) as usize;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    xd: [usize; 4],
    w: &[T],
    wd: [usize; 4],
    g: ConvGeom,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let [n, cin, h, wid] = xd;
    let [cout, cpg, kh, kw] = wd;
    let (oh, ow) = g.out_hw(h, wid, kh, kw).expect("conv geometry checked by caller");
    let opg = cout / g.groups;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let s = g.stride;
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let o_off = (b * cout + oc) * oh * ow;
            for icg in 0..cpg {
                let ic = grp * cpg + icg;
                let i_off = (b * cin + ic) * h * wid;
                for ki in 0..kh {
                    let dy = (ki * g.dilation) as isize - g.pad_h as isize;
                    let (y0, y1) = valid_range(dy, s, h, oh);
                    for kj in 0..kw {
                        let dx = (kj * g.dilation) as isize - g.pad_w as isize;
                        let (x0, x1) = valid_range(dx, s, wid, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((oc * cpg + icg) * kh + ki) * kw + kj;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = ((oy * s) as isize + dy) as usize;
                            let grow = &gout[o_off + oy * ow..o_off + (oy + 1) * ow];
                            let irow = i_off + iy * wid;
                            if s == 1 {
                                let ix0 = (x0 as isize + dx) as usize;
                                let len = x1 - x0;
                                let xin = &x[irow + ix0..irow + ix0 + len];
                                let gxr = &mut gx[irow + ix0..irow + ix0 + len];
                                for ((gi, &xi), &go) in gxr.iter_mut().zip(xin).zip(&grow[x0..x1]) {
                                    acc += go * xi;
                                    *gi += wv * go;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * s) as isize + dx) as usize;
                                    let go = grow[ox];
                                    acc += go * x[irow + ix];
                                    gx[irow + ix] += wv * go;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 3x3 average pool, padding 1, padded cells excluded from the mean.
pub fn avg_pool3_forward<T: Real>(x: &[T], xd: [usize; 4], stride: usize) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xd;
    let (oh, ow) = (strided_len(h, stride), strided_len(w, stride));
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let xi = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (cy, cx) = ((oy * stride) as isize, (ox * stride) as isize);
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for iy in (cy - 1).max(0)..(cy + 2).min(h as isize) {
                    for ix in (cx - 1).max(0)..(cx + 2).min(w as isize) {
                        acc += xi[iy as usize * w + ix as usize];
                        cnt += 1;
                    }
                }
                out[p * oh * ow + oy * ow + ox] = acc / T::of(cnt as f64);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn avg_pool3_backward<T: Real>(xd: [usize; 4], stride: usize, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = xd;
    let (oh, ow) = (strided_len(h, stride), strided_len(w, stride));
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (cy, cx) = ((oy * stride) as isize, (ox * stride) as isize);
                let ys = (cy - 1).max(0)..(cy + 2).min(h as isize);
                let xs = (cx - 1).max(0)..(cx + 2).min(w as isize);
                let cnt = ys.len() * xs.len();
                let gv = gout[p * oh * ow + oy * ow + ox] / T::of(cnt as f64);
                for iy in ys {
                    for ix in xs.clone() {
                        gx[p * h * w + iy as usize * w + ix as usize] += gv;
                    }
                }
            }
        }
    }
    gx
}

/// 3x3 max pool, padding 1. Returns the flat in-plane argmax per output cell.
pub fn max_pool3_forward<T: Real>(
    x: &[T],
    xd: [usize; 4],
    stride: usize,
) -> (Vec<T>, Vec<u32>, [usize; 4]) {
    let [n, c, h, w] = xd;
    let (oh, ow) = (strided_len(h, stride), strided_len(w, stride));
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let xi = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (cy, cx) = ((oy * stride) as isize, (ox * stride) as isize);
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for iy in (cy - 1).max(0)..(cy + 2).min(h as isize) {
                    for ix in (cx - 1).max(0)..(cx + 2).min(w as isize) {
                        let k = iy as usize * w + ix as usize;
                        if xi[k] > best {
                            best = xi[k];
                            bi = k;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (out, arg, [n, c, oh, ow])
}

pub fn max_pool3_backward<T: Real>(xd: [usize; 4], od: [usize; 4], arg: &[u32], gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = xd;
    let plane_out = od[2] * od[3];
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for o in 0..plane_out {
            let k = p * plane_out + o;
            gx[p * h * w + arg[k] as usize] += gout[k];
        }
    }
    gx
}

/// Keeps every `stride`-th pixel along both spatial axes.
pub fn subsample_forward<T: Real>(x: &[T], xd: [usize; 4], stride: usize) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xd;
    let (oh, ow) = (strided_len(h, stride), strided_len(w, stride));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x[p * h * w + oy * stride * w + ox * stride]);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn subsample_backward<T: Real>(xd: [usize; 4], stride: usize, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = xd;
    let (oh, ow) = (strided_len(h, stride), strided_len(w, stride));
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[p * h * w + oy * stride * w + ox * stride] = gout[p * oh * ow + oy * ow + ox];
            }
        }
    }
    gx
}

pub fn upsample_nearest_forward<T: Real>(x: &[T], xd: [usize; 4], f: usize) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xd;
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            let row = &x[p * h * w + (oy / f) * w..p * h * w + (oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn upsample_nearest_backward<T: Real>(xd: [usize; 4], f: usize, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = xd;
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[p * h * w + (oy / f) * w + ox / f] += gout[p * oh * ow + oy * ow + ox];
            }
        }
    }
    gx
}

/// Source taps `(i0, i1, frac)` of a half-pixel-centred bilinear resize by integer factor.
fn bilinear_taps(out_len: usize, in_len: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (num_traits::Float::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(x: &[T], xd: [usize; 4], f: usize) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xd;
    let (oh, ow) = (h * f, w * f);
    let ty = bilinear_taps(oh, h, f);
    let tx = bilinear_taps(ow, w, f);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let xi = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for &(x0, x1, lx) in &tx {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let v = hy * (hx * xi[y0 * w + x0] + lx * xi[y0 * w + x1])
                    + ly * (hx * xi[y1 * w + x0] + lx * xi[y1 * w + x1]);
                out.push(v);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn upsample_bilinear_backward<T: Real>(xd: [usize; 4], f: usize, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = xd;
    let (oh, ow) = (h * f, w * f);
    let ty = bilinear_taps(oh, h, f);
    let tx = bilinear_taps(ow, w, f);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let go = gout[p * oh * ow + oy * ow + ox];
                g[y0 * w + x0] += go * hy * hx;
                g[y0 * w + x1] += go * hy * lx;
                g[y1 * w + x0] += go * ly * hx;
                g[y1 * w + x1] += go * ly * lx;
            }
        }
    }
    gx
}

/// Per-sample, per-channel standardization followed by a learned channel affine.
/// Returns `(y, xhat, inv_std)`.
pub fn instance_norm_forward<T: Real>(
    x: &[T],
    xd: [usize; 4],
    scale: &[T],
    shift: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = xd;
    let hw = h * w;
    let inv_hw = T::of(1.0 / hw as f64);
    let eps = T::of(NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * c];
    for b in 0..n {
        for ch in 0..c {
            let p = b * c + ch;
            let xs = &x[p * hw..(p + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() * inv_hw;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for k in 0..hw {
                let xh = (xs[k] - mean) * is;
                xhat[p * hw + k] = xh;
                y[p * hw + k] = xh * scale[ch] + shift[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(grad_x, grad_scale, grad_shift)`.
pub fn instance_norm_backward<T: Real>(
    xd: [usize; 4],
    scale: &[T],
    xhat: &[T],
    inv_std: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = xd;
    let hw = h * w;
    let inv_hw = T::of(1.0 / hw as f64);
    let mut gx = vec![T::zero(); n * c * hw];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let p = b * c + ch;
            let g = &gout[p * hw..(p + 1) * hw];
            let xh = &xhat[p * hw..(p + 1) * hw];
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for k in 0..hw {
                sg += g[k];
                sgx += g[k] * xh[k];
            }
            gshift[ch] += sg;
            gscale[ch] += sgx;
            let s = scale[ch];
            let mean_d = sg * s * inv_hw;
            let mean_dx = sgx * s * inv_hw;
            for k in 0..hw {
                gx[p * hw + k] = inv_std[p] * (g[k] * s - mean_d - xh[k] * mean_dx);
            }
        }
    }
    (gx, gscale, gshift)
}
