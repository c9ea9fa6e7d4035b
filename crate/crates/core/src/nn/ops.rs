//! Structured tensor ops: convolution, pooling, upsampling, and the
//! deformable kernel-sampling primitive used by the synthesis head.
//!
//! Convolution runs as im2col + matrix product; the column matrix is
//! recomputed in the backward pass instead of saved, trading a little
//! compute for a much smaller live graph.

use ndarray::{Array2, ArrayD, IxDyn};

use super::tensor::{make_op, Scalar, Tensor};

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<S>::from_elem((c_in * kh * kw, oh * ow), S::ZERO);
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_row = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // contiguous source segment for the valid ox range
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(
    cols: &Array2<S>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let cs = cols.as_slice().unwrap();
    for ci in 0..c_in {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_row = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        for ox in lo..hi {
                            dst[ox + kx - pad] += src[ox];
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution over `(N, C_in, H, W)` with weight `(C_out, C_in, kh, kw)`
/// and optional bias `(C_out,)`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be 4-D, got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);

    let mut out = ArrayD::from_elem(IxDyn(&[n, c_out, oh, ow]), S::ZERO);
    {
        let xv = x.value();
        let xsl = xv.as_slice().unwrap();
        let wv = weight.value();
        let w2 = wv
            .view()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .unwrap();
        let osl = out.as_slice_mut().unwrap();
        for i in 0..n {
            let cols = im2col(
                &xsl[i * c_in * h * w..(i + 1) * c_in * h * w],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
            );
            let prod = w2.dot(&cols);
            osl[i * c_out * oh * ow..(i + 1) * c_out * oh * ow]
                .copy_from_slice(prod.as_slice().unwrap());
        }
        if let Some(b) = bias {
            let bv = b.value();
            let bs = bv.as_slice().unwrap();
            for i in 0..n {
                for co in 0..c_out {
                    let seg = &mut osl[(i * c_out + co) * oh * ow..(i * c_out + co + 1) * oh * ow];
                    let bc = bs[co];
                    for v in seg.iter_mut() {
                        *v += bc;
                    }
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    make_op(out, parents, move |g, ps| {
        let xs = ps[0].shape();
        let ws = ps[1].shape();
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let gsl = g.as_slice().unwrap();

        let need_gx = ps[0].tracked();
        let need_gw = ps[1].tracked();

        let mut gx = if need_gx {
            Some(ArrayD::from_elem(IxDyn(&xs), S::ZERO))
        } else {
            None
        };
        let mut gw2 = if need_gw {
            Some(Array2::<S>::from_elem((c_out, c_in * kh * kw), S::ZERO))
        } else {
            None
        };

        if need_gx || need_gw {
            let xv = ps[0].value();
            let xsl = xv.as_slice().unwrap();
            let wv = ps[1].value();
            let w2 = wv
                .view()
                .into_shape_with_order((c_out, c_in * kh * kw))
                .unwrap();
            for i in 0..n {
                let g2 = ndarray::ArrayView2::from_shape(
                    (c_out, oh * ow),
                    &gsl[i * c_out * oh * ow..(i + 1) * c_out * oh * ow],
                )
                .unwrap();
                if need_gw {
                    let cols = im2col(
                        &xsl[i * c_in * h * w..(i + 1) * c_in * h * w],
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                    );
                    *gw2.as_mut().unwrap() += &g2.dot(&cols.t());
                }
                if need_gx {
                    let gcols = w2.t().dot(&g2);
                    let gx_arr = gx.as_mut().unwrap();
                    let gx_sl = gx_arr.as_slice_mut().unwrap();
                    col2im(
                        &gcols,
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        &mut gx_sl[i * c_in * h * w..(i + 1) * c_in * h * w],
                    );
                }
            }
        }
        if let Some(gx) = gx {
            ps[0].accumulate_grad(&gx);
        }
        if let Some(gw2) = gw2 {
            let gw = gw2
                .into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
                .unwrap();
            ps[1].accumulate_grad(&gw);
        }
        if ps.len() == 3 && ps[2].tracked() {
            let mut gb = ArrayD::from_elem(IxDyn(&[c_out]), S::ZERO);
            let gbs = gb.as_slice_mut().unwrap();
            for i in 0..n {
                for co in 0..c_out {
                    let seg = &gsl[(i * c_out + co) * oh * ow..(i * c_out + co + 1) * oh * ow];
                    let mut acc = S::ZERO;
                    for &v in seg {
                        acc += v;
                    }
                    gbs[co] += acc;
                }
            }
            ps[2].accumulate_grad(&gb);
        }
    })
}

/// Depthwise 3x3-style convolution: weight `(C, kh, kw)`, one filter per channel.
pub fn depthwise_conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4);
    assert_eq!(ws.len(), 3);
    assert_eq!(xs[1], ws[0], "depthwise channel mismatch");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ws[1], ws[2]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);

    let mut out = ArrayD::from_elem(IxDyn(&[n, c, oh, ow]), S::ZERO);
    {
        let xv = x.value();
        let xsl = xv.as_slice().unwrap();
        let wv = weight.value();
        let wsl = wv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for p in 0..n * c {
            let ci = p % c;
            let plane = &xsl[p * h * w..(p + 1) * h * w];
            let filt = &wsl[ci * kh * kw..(ci + 1) * kh * kw];
            let dst = &mut osl[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let wk = filt[ky * kw + kx];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(ow);
                            let src = &srow[lo + kx - pad..hi + kx - pad];
                            for (d, &s) in drow[lo..hi].iter_mut().zip(src) {
                                *d += wk * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d += wk * srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.value();
            let bs = bv.as_slice().unwrap();
            for p in 0..n * c {
                let seg = &mut osl[p * oh * ow..(p + 1) * oh * ow];
                let bc = bs[p % c];
                for v in seg.iter_mut() {
                    *v += bc;
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    make_op(out, parents, move |g, ps| {
        let xs = ps[0].shape();
        let ws = ps[1].shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[1], ws[2]);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let gsl = g.as_slice().unwrap();
        let xv = ps[0].value();
        let xsl = xv.as_slice().unwrap();
        let wv = ps[1].value();
        let wsl = wv.as_slice().unwrap();

        let need_gx = ps[0].tracked();
        let need_gw = ps[1].tracked();
        let mut gx = ArrayD::from_elem(IxDyn(&xs), S::ZERO);
        let mut gw = ArrayD::from_elem(IxDyn(&ws), S::ZERO);
        if need_gx || need_gw {
            let gx_sl = gx.as_slice_mut().unwrap();
            let gw_sl = gw.as_slice_mut().unwrap();
            for p in 0..n * c {
                let ci = p % c;
                let plane = &xsl[p * h * w..(p + 1) * h * w];
                let filt = &wsl[ci * kh * kw..(ci + 1) * kh * kw];
                let gseg = &gsl[p * oh * ow..(p + 1) * oh * ow];
                let gx_plane = &mut gx_sl[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    let grow = &gseg[oy * ow..(oy + 1) * ow];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row0 = iy as usize * w;
                        for kx in 0..kw {
                            let wk = filt[ky * kw + kx];
                            if stride == 1 {
                                let lo = pad.saturating_sub(kx);
                                let hi = (w + pad - kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let off = kx + lo - pad;
                                if need_gw {
                                    let mut acc = S::ZERO;
                                    let src = &plane[row0 + off..row0 + off + hi - lo];
                                    for (&g, &s) in grow[lo..hi].iter().zip(src) {
                                        acc += g * s;
                                    }
                                    gw_sl[ci * kh * kw + ky * kw + kx] += acc;
                                }
                                if need_gx {
                                    let dst = &mut gx_plane[row0 + off..row0 + off + hi - lo];
                                    for (d, &g) in dst.iter_mut().zip(&grow[lo..hi]) {
                                        *d += wk * g;
                                    }
                                }
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = row0 + ix as usize;
                                    if need_gw {
                                        gw_sl[ci * kh * kw + ky * kw + kx] += g * plane[xi];
                                    }
                                    if need_gx {
                                        gx_plane[xi] += wk * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_gx {
            ps[0].accumulate_grad(&gx);
        }
        if need_gw {
            ps[1].accumulate_grad(&gw);
        }
        if ps.len() == 3 && ps[2].tracked() {
            let mut gb = ArrayD::from_elem(IxDyn(&[c]), S::ZERO);
            let gbs = gb.as_slice_mut().unwrap();
            for i in 0..n {
                for ci in 0..c {
                    let seg = &gsl[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
                    let mut acc = S::ZERO;
                    for &v in seg {
                        acc += v;
                    }
                    gbs[ci] += acc;
                }
            }
            ps[2].accumulate_grad(&gb);
        }
    })
}

/// Non-overlapping average pooling by factor `k` over the last two axes of a
/// 4-D tensor.
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4);
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(h % k == 0 && w % k == 0, "avg_pool2d: {k} must divide {h}x{w}");
    let (oh, ow) = (h / k, w / k);
    let inv = S::ONE / S::from_f64((k * k) as f64);

    let mut out = ArrayD::from_elem(IxDyn(&[n, c, oh, ow]), S::ZERO);
    {
        let xv = x.value();
        let xsl = xv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for p in 0..n * c {
            let plane = &xsl[p * h * w..(p + 1) * h * w];
            let dst = &mut osl[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::ZERO;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += plane[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
    }

    make_op(out, vec![x.clone()], move |g, ps| {
        if !ps[0].tracked() {
            return;
        }
        let xs = ps[0].shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let mut gx = ArrayD::from_elem(IxDyn(&xs), S::ZERO);
        let gsl = g.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        for p in 0..n * c {
            let gseg = &gsl[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut gxs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gseg[oy * ow + ox] * inv;
                    for dy in 0..k {
                        for dx in 0..k {
                            dst[(oy * k + dy) * w + ox * k + dx] += gv;
                        }
                    }
                }
            }
        }
        ps[0].accumulate_grad(&gx);
    })
}

/// Nearest-neighbor upsampling by factor `k` over the last two axes.
pub fn upsample_nearest2d<S: Scalar>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4);
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h * k, w * k);

    let mut out = ArrayD::from_elem(IxDyn(&[n, c, oh, ow]), S::ZERO);
    {
        let xv = x.value();
        let xsl = xv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for p in 0..n * c {
            let plane = &xsl[p * h * w..(p + 1) * h * w];
            let dst = &mut osl[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / k;
                for ox in 0..ow {
                    dst[oy * ow + ox] = plane[sy * w + ox / k];
                }
            }
        }
    }

    make_op(out, vec![x.clone()], move |g, ps| {
        if !ps[0].tracked() {
            return;
        }
        let xs = ps[0].shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * k, w * k);
        let mut gx = ArrayD::from_elem(IxDyn(&xs), S::ZERO);
        let gsl = g.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        for p in 0..n * c {
            let gseg = &gsl[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut gxs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let sy = oy / k;
                for ox in 0..ow {
                    dst[sy * w + ox / k] += gseg[oy * ow + ox];
                }
            }
        }
        ps[0].accumulate_grad(&gx);
    })
}

/// Fused group normalization over `(N, C, H, W)` with affine parameters
/// `gamma`/`beta` of shape `(1, C, 1, 1)`. One forward pass; the backward
/// uses the standard normalized-statistics derivation instead of unrolling
/// a dozen elementwise primitives.
pub fn group_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: S,
) -> Tensor<S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "group_norm input must be 4-D");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(c % groups, 0, "groups must divide channels");
    let gsize = (c / groups) * h * w;

    let mut out = ArrayD::from_elem(IxDyn(&xs), S::ZERO);
    let mut means = vec![S::ZERO; n * groups];
    let mut inv_stds = vec![S::ZERO; n * groups];
    {
        let xv = x.value();
        let xsl = xv.as_slice().unwrap();
        let gv = gamma.value();
        let gsl = gv.as_slice().unwrap();
        let bv = beta.value();
        let bsl = bv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        let inv_n = S::ONE / S::from_f64(gsize as f64);
        for i in 0..n {
            for g in 0..groups {
                let base = i * c * h * w + g * gsize;
                let seg = &xsl[base..base + gsize];
                let mut mu = S::ZERO;
                for &v in seg {
                    mu += v;
                }
                mu *= inv_n;
                let mut var = S::ZERO;
                for &v in seg {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_n;
                let inv_std = S::ONE / (var + eps).sqrt();
                means[i * groups + g] = mu;
                inv_stds[i * groups + g] = inv_std;
                let dst = &mut osl[base..base + gsize];
                for (j, d) in dst.iter_mut().enumerate() {
                    let ch = g * (c / groups) + j / (h * w);
                    *d = (seg[j] - mu) * inv_std * gsl[ch] + bsl[ch];
                }
            }
        }
    }

    make_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gout, ps| {
            let xs = ps[0].shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let gsize = (c / groups) * h * w;
            let xv = ps[0].value();
            let xsl = xv.as_slice().unwrap();
            let gv = ps[1].value();
            let gsl = gv.as_slice().unwrap();
            let gos = gout.as_slice().unwrap();

            let need_gx = ps[0].tracked();
            let need_gg = ps[1].tracked();
            let need_gb = ps[2].tracked();
            let mut gx = ArrayD::from_elem(IxDyn(&xs), S::ZERO);
            let mut ggamma = vec![S::ZERO; c];
            let mut gbeta = vec![S::ZERO; c];
            let inv_n = S::ONE / S::from_f64(gsize as f64);

            for i in 0..n {
                for g in 0..groups {
                    let base = i * c * h * w + g * gsize;
                    let seg = &xsl[base..base + gsize];
                    let go = &gos[base..base + gsize];
                    let mu = means[i * groups + g];
                    let inv_std = inv_stds[i * groups + g];

                    if need_gg || need_gb {
                        for (j, &gv) in go.iter().enumerate() {
                            let ch = g * (c / groups) + j / (h * w);
                            if need_gb {
                                gbeta[ch] += gv;
                            }
                            if need_gg {
                                ggamma[ch] += gv * (seg[j] - mu) * inv_std;
                            }
                        }
                    }
                    if need_gx {
                        // ghat = gout * gamma; dx = inv_std * (ghat - mean(ghat)
                        //        - xhat * mean(ghat * xhat))
                        let mut sum_ghat = S::ZERO;
                        let mut sum_ghat_xhat = S::ZERO;
                        for (j, &gv) in go.iter().enumerate() {
                            let ch = g * (c / groups) + j / (h * w);
                            let ghat = gv * gsl[ch];
                            let xhat = (seg[j] - mu) * inv_std;
                            sum_ghat += ghat;
                            sum_ghat_xhat += ghat * xhat;
                        }
                        let m1 = sum_ghat * inv_n;
                        let m2 = sum_ghat_xhat * inv_n;
                        let dst = gx.as_slice_mut().unwrap();
                        for (j, &gv) in go.iter().enumerate() {
                            let ch = g * (c / groups) + j / (h * w);
                            let ghat = gv * gsl[ch];
                            let xhat = (seg[j] - mu) * inv_std;
                            dst[base + j] += inv_std * (ghat - m1 - xhat * m2);
                        }
                    }
                }
            }
            if need_gx {
                ps[0].accumulate_grad_owned(gx);
            }
            if need_gg {
                ps[1].accumulate_grad_owned(
                    ArrayD::from_shape_vec(IxDyn(&[1, c, 1, 1]), ggamma).unwrap(),
                );
            }
            if need_gb {
                ps[2].accumulate_grad_owned(
                    ArrayD::from_shape_vec(IxDyn(&[1, c, 1, 1]), gbeta).unwrap(),
                );
            }
        },
    )
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn bilinear_taps<S: Scalar>(h: usize, w: usize, yf: S, xf: S) -> ([usize; 4], [S; 4], S, S) {
    // Border-replicate sampling: corner indices are clamped, which also
    // zeroes the coordinate derivative once both taps collapse to the edge.
    let yfl = yf.to_f64().floor();
    let xfl = xf.to_f64().floor();
    let ty = yf - S::from_f64(yfl);
    let tx = xf - S::from_f64(xfl);
    let clampi = |v: f64, hi: usize| -> usize {
        if v < 0.0 {
            0
        } else if v as usize >= hi {
            hi - 1
        } else {
            v as usize
        }
    };
    let y0 = clampi(yfl, h);
    let y1 = clampi(yfl + 1.0, h);
    let x0 = clampi(xfl, w);
    let x1 = clampi(xfl + 1.0, w);
    let one = S::ONE;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (one - ty) * (one - tx),
            (one - ty) * tx,
            ty * (one - tx),
            ty * tx,
        ],
        ty,
        tx,
    )
}

/// Deformable kernel sampling: per output pixel, a weighted sum of `K*K`
/// bilinear taps of `image` at offset positions.
///
/// `image`: `(N, C, H, W)` — treated as data; no gradient flows to it.
/// `weights`: `(N, K2, H, W)` kernel weights.
/// `offsets`: `(N, 2*K2, H, W)`; first `K2` channels are dy, last are dx,
/// added to the base kernel grid centered on the output pixel.
pub fn kernel_sample<S: Scalar>(
    image: &Tensor<S>,
    weights: &Tensor<S>,
    offsets: &Tensor<S>,
    k: usize,
) -> Tensor<S> {
    let is = image.shape();
    let wsh = weights.shape();
    let osh = offsets.shape();
    assert_eq!(is.len(), 4);
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let k2 = k * k;
    assert_eq!(wsh, vec![n, k2, h, w], "kernel weights shape");
    assert_eq!(osh, vec![n, 2 * k2, h, w], "kernel offsets shape");
    let half = (k / 2) as f64;

    let forward = |img: &[S], wt: &[S], off: &[S], out: &mut [S]| {
        for i in 0..n {
            let woff = i * k2 * h * w;
            let ooff = i * 2 * k2 * h * w;
            for y in 0..h {
                for x in 0..w {
                    let pix = y * w + x;
                    for kk in 0..k2 {
                        let (kyi, kxi) = (kk / k, kk % k);
                        let wv = wt[woff + kk * h * w + pix];
                        let dy = off[ooff + kk * h * w + pix];
                        let dx = off[ooff + (k2 + kk) * h * w + pix];
                        let yf = S::from_f64(y as f64 + kyi as f64 - half) + dy;
                        let xf = S::from_f64(x as f64 + kxi as f64 - half) + dx;
                        let (idx, tap, _ty, _tx) = bilinear_taps::<S>(h, w, yf, xf);
                        for ci in 0..c {
                            let plane = &img[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                            let v = tap[0] * plane[idx[0]]
                                + tap[1] * plane[idx[1]]
                                + tap[2] * plane[idx[2]]
                                + tap[3] * plane[idx[3]];
                            out[(i * c + ci) * h * w + pix] += wv * v;
                        }
                    }
                }
            }
        }
    };

    let mut out = ArrayD::from_elem(IxDyn(&[n, c, h, w]), S::ZERO);
    {
        let iv = image.value();
        let wv = weights.value();
        let ov = offsets.value();
        forward(
            iv.as_slice().unwrap(),
            wv.as_slice().unwrap(),
            ov.as_slice().unwrap(),
            out.as_slice_mut().unwrap(),
        );
    }

    make_op(
        out,
        vec![image.clone(), weights.clone(), offsets.clone()],
        move |g, ps| {
            let need_gw = ps[1].tracked();
            let need_go = ps[2].tracked();
            if !need_gw && !need_go {
                return;
            }
            let iv = ps[0].value();
            let img = iv.as_slice().unwrap();
            let wvv = ps[1].value();
            let wt = wvv.as_slice().unwrap();
            let ovv = ps[2].value();
            let off = ovv.as_slice().unwrap();
            let gsl = g.as_slice().unwrap();

            let mut gw = ArrayD::from_elem(IxDyn(&[n, k2, h, w]), S::ZERO);
            let mut go = ArrayD::from_elem(IxDyn(&[n, 2 * k2, h, w]), S::ZERO);
            let gw_sl = gw.as_slice_mut().unwrap();
            let go_sl = go.as_slice_mut().unwrap();

            for i in 0..n {
                let woff = i * k2 * h * w;
                let ooff = i * 2 * k2 * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let pix = y * w + x;
                        for kk in 0..k2 {
                            let (kyi, kxi) = (kk / k, kk % k);
                            let wv = wt[woff + kk * h * w + pix];
                            let dy = off[ooff + kk * h * w + pix];
                            let dx = off[ooff + (k2 + kk) * h * w + pix];
                            let yf = S::from_f64(y as f64 + kyi as f64 - half) + dy;
                            let xf = S::from_f64(x as f64 + kxi as f64 - half) + dx;
                            let (idx, tap, ty, tx) = bilinear_taps::<S>(h, w, yf, xf);
                            let one = S::ONE;
                            let mut gw_acc = S::ZERO;
                            let mut gy_acc = S::ZERO;
                            let mut gx_acc = S::ZERO;
                            for ci in 0..c {
                                let plane =
                                    &img[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                                let p00 = plane[idx[0]];
                                let p01 = plane[idx[1]];
                                let p10 = plane[idx[2]];
                                let p11 = plane[idx[3]];
                                let gout = gsl[(i * c + ci) * h * w + pix];
                                let v = tap[0] * p00 + tap[1] * p01 + tap[2] * p10 + tap[3] * p11;
                                gw_acc += gout * v;
                                // d(sample)/dy and /dx of the bilinear form.
                                let dv_dy = (one - tx) * (p10 - p00) + tx * (p11 - p01);
                                let dv_dx = (one - ty) * (p01 - p00) + ty * (p11 - p10);
                                gy_acc += gout * wv * dv_dy;
                                gx_acc += gout * wv * dv_dx;
                            }
                            if need_gw {
                                gw_sl[woff + kk * h * w + pix] += gw_acc;
                            }
                            if need_go {
                                go_sl[ooff + kk * h * w + pix] += gy_acc;
                                go_sl[ooff + (k2 + kk) * h * w + pix] += gx_acc;
                            }
                        }
                    }
                }
            }
            if need_gw {
                ps[1].accumulate_grad(&gw);
            }
            if need_go {
                ps[2].accumulate_grad(&go);
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn tp(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::param(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = tp((0..16).map(|i| i as f64).collect(), &[1, 1, 4, 4]);
        // 3x3 delta kernel
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = tp(wv, &[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1);
        assert_eq!(y.to_array(), x.to_array());
    }

    #[test]
    fn conv2d_stride_two_halves_dims() {
        let x = tp(vec![1.0; 2 * 3 * 8 * 8], &[2, 3, 8, 8]);
        let w = tp(vec![0.1; 5 * 3 * 3 * 3], &[5, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1);
        assert_eq!(y.shape(), vec![2, 5, 4, 4]);
    }

    #[test]
    fn avg_pool_then_upsample_shapes() {
        let x = tp((0..32).map(|i| i as f64).collect(), &[1, 2, 4, 4]);
        let p = avg_pool2d(&x, 2);
        assert_eq!(p.shape(), vec![1, 2, 2, 2]);
        let u = upsample_nearest2d(&p, 2);
        assert_eq!(u.shape(), vec![1, 2, 4, 4]);
        // pooling of the constant-per-block upsample is the identity
        let p2 = avg_pool2d(&u, 2);
        assert_eq!(p2.to_array(), p.to_array());
    }

    #[test]
    fn kernel_sample_center_delta_is_identity() {
        let h = 4;
        let w = 4;
        let k = 3;
        let img = Tensor::from_array(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), (0..16).map(|i| i as f64).collect())
                .unwrap(),
        );
        let mut wv = vec![0.0; k * k * h * w];
        // delta at kernel center (index 4 of 9)
        for pix in 0..h * w {
            wv[4 * h * w + pix] = 1.0;
        }
        let weights = tp(wv, &[1, k * k, h, w]);
        let offsets = tp(vec![0.0; 2 * k * k * h * w], &[1, 2 * k * k, h, w]);
        let out = kernel_sample(&img, &weights, &offsets, k);
        assert_eq!(out.to_array(), img.to_array());
    }
}
