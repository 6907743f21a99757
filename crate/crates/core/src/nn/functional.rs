//! Differentiable image and sequence kernels on NCHW / `[.., D]` tensors.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

fn expect_rank4<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected [B, C, H, W]".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Valid output columns `[lo, hi)` for kernel offset `kx` at stride 1.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo, k, s) = (self.ho, self.wo, self.k, self.stride);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if s == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            drow[..lo].fill(T::zero());
                            drow[hi..].fill(T::zero());
                            let ix0 = lo + kx - self.pad;
                            drow[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - self.pad as isize;
                                *d = if ix < 0 || ix >= self.w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], gx: &mut [T]) {
        let (ho, wo, k, s) = (self.ho, self.wo, self.k, self.stride);
        for ci in 0..self.c_in {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if s == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            let ix0 = lo + kx - self.pad;
                            drow[ix0..ix0 + (hi - lo)]
                                .iter_mut()
                                .zip(&srow[lo..hi])
                                .for_each(|(d, &v)| *d += v);
                        } else {
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with square kernel `w[C_out, C_in, k, k]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (b, c_in, h, w) = expect_rank4("conv2d", x)?;
    let (c_out, wc, k) = match *weight.shape() {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: weight.shape().to_vec(),
                reason: "weight must be [C_out, C_in, k, k]".into(),
            })
        }
    };
    if wc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(bt) = bias {
        if bt.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: bt.shape().to_vec(),
            });
        }
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("spatial size smaller than kernel {k} (padding {pad}, stride {stride})"),
        });
    }
    let g = ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    };
    let (in_plane, out_plane) = (c_in * h * w, g.ho * g.wo);
    let kk = g.col_rows();

    let mut out = vec![T::zero(); b * c_out * out_plane];
    {
        let xd = x.data();
        let wd = weight.data();
        let wmat = MatRef::row_major(&wd, c_out, kk);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * out_plane] };
        for bi in 0..b {
            let xb = &xd[bi * in_plane..(bi + 1) * in_plane];
            let ob = &mut out[bi * c_out * out_plane..(bi + 1) * c_out * out_plane];
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut col);
                &col
            };
            gemm(T::one(), wmat, MatRef::row_major(cols, kk, out_plane), T::zero(), ob);
            if let Some(bt) = bias {
                let bd = bt.data();
                for (co, chunk) in ob.chunks_mut(out_plane).enumerate() {
                    let bv = bd[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (xs, ws) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "conv2d",
        vec![b, c_out, g.ho, g.wo],
        out,
        parents,
        move |grad, needs| {
            let xd = xs.data();
            let wd = ws.data();
            let mut gx = needs[0].then(|| vec![T::zero(); b * in_plane]);
            let mut gw = needs[1].then(|| vec![T::zero(); c_out * kk]);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * out_plane] };
            for bi in 0..b {
                let gb = MatRef::row_major(&grad[bi * c_out * out_plane..(bi + 1) * c_out * out_plane], c_out, out_plane);
                let xb = &xd[bi * in_plane..(bi + 1) * in_plane];
                if let Some(gw) = gw.as_mut() {
                    let cols: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        g.im2col(xb, &mut col);
                        &col
                    };
                    gemm(T::one(), gb, MatRef::row_major(cols, kk, out_plane).t(), T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[bi * in_plane..(bi + 1) * in_plane];
                    let wt = MatRef::row_major(&wd, c_out, kk).t();
                    if g.is_pointwise() {
                        gemm(T::one(), wt, gb, T::zero(), gxb);
                    } else {
                        gemm(T::one(), wt, gb, T::zero(), &mut col);
                        g.col2im(&col, gxb);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut gbias = vec![T::zero(); c_out];
                    for bi in 0..b {
                        for (co, gbv) in gbias.iter_mut().enumerate() {
                            let s = &grad[(bi * c_out + co) * out_plane..(bi * c_out + co + 1) * out_plane];
                            *gbv += s.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                    gbias
                }));
            }
            res
        },
    ))
}

/// Batch-norm state handed to [`batch_norm`].
pub struct BatchNormArgs<'a, T: Element> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    pub train: bool,
}

/// Per-channel normalization of `[B, C, H, W]`. In train mode batch
/// statistics are used and the running estimates are updated in place
/// (unbiased variance); eval mode reads the running estimates only.
pub fn batch_norm<T: Element>(x: &Tensor<T>, args: BatchNormArgs<'_, T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = expect_rank4("batch_norm", x)?;
    for p in [args.gamma, args.beta, args.running_mean, args.running_var] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let plane = h * w;
    let m = b * plane;
    if args.train && m < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            shape: x.shape().to_vec(),
            reason: "train mode needs at least 2 values per channel".into(),
        });
    }
    let (mean, invstd): (Vec<f64>, Vec<f64>) = {
        let xd = x.data();
        if args.train {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                        .iter()
                        .map(|v| (v.f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = ss / m as f64;
            }
            let mut rm = args.running_mean.data_mut();
            let mut rv = args.running_var.data_mut();
            let unbias = m as f64 / (m as f64 - 1.0);
            for ci in 0..c {
                rm[ci] = T::cast((1.0 - args.momentum) * rm[ci].f64() + args.momentum * mean[ci]);
                rv[ci] = T::cast((1.0 - args.momentum) * rv[ci].f64() + args.momentum * var[ci] * unbias);
            }
            let invstd = var.iter().map(|v| 1.0 / (v + args.eps).sqrt()).collect();
            (mean, invstd)
        } else {
            let rm = args.running_mean.data();
            let rv = args.running_var.data();
            (
                rm.iter().map(|v| v.f64()).collect(),
                rv.iter().map(|v| 1.0 / (v.f64() + args.eps).sqrt()).collect(),
            )
        }
    };

    let out = {
        let xd = x.data();
        let gd = args.gamma.data();
        let bd = args.beta.data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = T::cast(gd[ci].f64() * invstd[ci]);
                let shift = T::cast(bd[ci].f64() - mean[ci] * invstd[ci] * gd[ci].f64());
                let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                out[r.clone()]
                    .iter_mut()
                    .zip(&xd[r])
                    .for_each(|(o, &v)| *o = v * scale + shift);
            }
        }
        out
    };

    let (xs, gs) = (x.clone(), args.gamma.clone());
    let train = args.train;
    Ok(Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), args.gamma.clone(), args.beta.clone()],
        move |grad, needs| {
            let xd = xs.data();
            let gd = gs.data();
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                    let (mu, is) = (mean[ci], invstd[ci]);
                    for (&gv, &xv) in grad[r.clone()].iter().zip(&xd[r]) {
                        let gv = gv.f64();
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * (xv.f64() - mu) * is;
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); xd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                        let (mu, is, gam) = (mean[ci], invstd[ci], gd[ci].f64());
                        if train {
                            let k1 = gam * is;
                            let mg = sum_g[ci] / m as f64;
                            let mgx = sum_gx[ci] / m as f64;
                            for ((o, &gv), &xv) in gx[r.clone()].iter_mut().zip(&grad[r.clone()]).zip(&xd[r]) {
                                let xhat = (xv.f64() - mu) * is;
                                *o = T::cast(k1 * (gv.f64() - mg - xhat * mgx));
                            }
                        } else {
                            let k1 = T::cast(gam * is);
                            gx[r.clone()].iter_mut().zip(&grad[r]).for_each(|(o, &gv)| *o = gv * k1);
                        }
                    }
                }
                gx
            });
            let ggamma = needs[1].then(|| sum_gx.iter().map(|&v| T::cast(v)).collect());
            let gbeta = needs[2].then(|| sum_g.iter().map(|&v| T::cast(v)).collect());
            vec![gx, ggamma, gbeta]
        },
    ))
}

/// 2×2 max pooling with stride 2; ties go to the first element in
/// row-major order inside the window.
pub fn max_pool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = expect_rank4("max_pool2d", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool2d",
            shape: x.shape().to_vec(),
            reason: "spatial dims must be even".into(),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    {
        let xd = x.data();
        for p in 0..b * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    let n = x.numel();
    Ok(Tensor::from_op("max_pool2d", vec![b, c, ho, wo], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![T::zero(); n];
        for (&i, &gv) in arg.iter().zip(g) {
            gx[i as usize] += gv;
        }
        vec![Some(gx)]
    }))
}

/// Two-tap linear interpolation weights for resampling `n_in` samples to
/// `n_out` with half-pixel centers (align-corners = false).
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of planar data, `planes` × `h` × `w` → `oh` × `ow`.
pub fn resize_bilinear_planes<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let v = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0].f64() + lx * src[y0 * w + x1].f64())
                    + ly * ((1.0 - lx) * src[y1 * w + x0].f64() + lx * src[y1 * w + x1].f64());
                out.push(T::cast(v));
            }
        }
    }
    out
}

/// Differentiable bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]`.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = expect_rank4("upsample_bilinear", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("upsample to an empty size".into()));
    }
    let out = resize_bilinear_planes(&x.data(), b * c, h, w, oh, ow);
    let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
    Ok(Tensor::from_op("upsample_bilinear", vec![b, c, oh, ow], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let gv = src[oy * ow + ox].f64();
                    dst[y0 * w + x0] += T::cast(gv * (1.0 - ly) * (1.0 - lx));
                    dst[y0 * w + x1] += T::cast(gv * (1.0 - ly) * lx);
                    dst[y1 * w + x0] += T::cast(gv * ly * (1.0 - lx));
                    dst[y1 * w + x1] += T::cast(gv * ly * lx);
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// ×2 bilinear upsampling.
pub fn upsample2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = expect_rank4("upsample2x", x)?;
    upsample_bilinear(x, 2 * h, 2 * w)
}

/// Normalizes over the last axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = *x.shape().last().expect("non-empty shape");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let stats: Vec<(f64, f64)> = x
        .data()
        .chunks(d)
        .map(|r| {
            let mu = r.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / d as f64;
            (mu, 1.0 / (var + eps).sqrt())
        })
        .collect();
    let out = {
        let xd = x.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut out = Vec::with_capacity(xd.len());
        for (r, &(mu, is)) in xd.chunks(d).zip(&stats) {
            for ((&v, &gm), &bt) in r.iter().zip(gd.iter()).zip(bd.iter()) {
                out.push(T::cast((v.f64() - mu) * is * gm.f64() + bt.f64()));
            }
        }
        out
    };
    let (xs, gs) = (x.clone(), gamma.clone());
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, needs| {
            let xd = xs.data();
            let gd = gs.data();
            let mut ggamma = vec![0.0f64; d];
            let mut gbeta = vec![0.0f64; d];
            let mut gx = needs[0].then(|| vec![T::zero(); rows * d]);
            let mut dxhat = vec![0.0f64; d];
            let mut xhat = vec![0.0f64; d];
            for (ri, &(mu, is)) in stats.iter().enumerate() {
                let xr = &xd[ri * d..(ri + 1) * d];
                let gr = &g[ri * d..(ri + 1) * d];
                let (mut s1, mut s2) = (0.0, 0.0);
                for j in 0..d {
                    xhat[j] = (xr[j].f64() - mu) * is;
                    let gv = gr[j].f64();
                    ggamma[j] += gv * xhat[j];
                    gbeta[j] += gv;
                    dxhat[j] = gv * gd[j].f64();
                    s1 += dxhat[j];
                    s2 += dxhat[j] * xhat[j];
                }
                if let Some(gx) = gx.as_mut() {
                    for j in 0..d {
                        gx[ri * d + j] = T::cast(is * (dxhat[j] - s1 / d as f64 - xhat[j] * s2 / d as f64));
                    }
                }
            }
            vec![
                gx,
                needs[1].then(|| ggamma.iter().map(|&v| T::cast(v)).collect()),
                needs[2].then(|| gbeta.iter().map(|&v| T::cast(v)).collect()),
            ]
        },
    ))
}
