//! Direct 2-D cross-correlation with zero padding.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output indices `o` in `[lo, hi)` whose tap `o * stride + k - padding`
/// lands inside `[0, input)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let last = input + padding;
    let hi = if last <= k {
        0
    } else {
        ((last - k - 1) / stride + 1).min(output)
    };
    (lo, hi.max(lo))
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = lanes.iter().copied().sum::<T>();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x * y;
    }
    acc
}

fn check(x: &Tensor<impl Real>, weight: &Tensor<impl Real>, stride: usize, padding: usize) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    let (_, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    Ok(())
}

/// `x`: (B, C_in, H, W), `weight`: (C_out, C_in, kh, kw), `bias`: (C_out).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    check(x, weight, stride, padding)?;
    let (b, cin, h, w) = x.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(Error::shape("conv2d bias", bias.shape(), &[cout]));
        }
    }
    let oh = conv_output_size(h, kh, stride, padding);
    let ow = conv_output_size(w, kw, stride, padding);
    if stride == 1 {
        return Ok(conv2d_wide(x, weight, bias, padding));
    }
    let mut out = vec![T::zero(); b * cout * oh * ow];
    let xd = x.data();
    let wd = weight.data();
    for bi in 0..b {
        for oc in 0..cout {
            let out_plane = &mut out[(bi * cout + oc) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                out_plane.fill(bias.data()[oc]);
            }
            for ic in 0..cin {
                let in_plane = &xd[(bi * cin + ic) * h * w..][..h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                    for kx in 0..kw {
                        let wv = wd[((oc * cin + ic) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let n = ox1 - ox0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_plane[iy * w..][..w];
                            let out_row = &mut out_plane[oy * ow + ox0..][..n];
                            let ix0 = ox0 * stride + kx - padding;
                            if stride == 1 {
                                for (o, &i) in out_row.iter_mut().zip(&in_row[ix0..ix0 + n]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, &i) in out_row.iter_mut().zip(in_row[ix0..].iter().step_by(stride)) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[b, cout, oh, ow], out))
}

/// Zero-pads every plane by `p` and appends `tail` zeros, giving rows of
/// width `w + 2p` that can be addressed as one flat slice.
fn pad_planes<T: Real>(x: &[T], planes: usize, h: usize, w: usize, p: usize, tail: usize) -> (Vec<T>, usize) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let stride = hp * wp + tail;
    let mut out = vec![T::zero(); planes * stride];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(stride)) {
        for r in 0..h {
            dst[(r + p) * wp + p..][..w].copy_from_slice(&src[r * w..][..w]);
        }
    }
    (out, stride)
}

/// Stride-1 convolution computed on wide rows: each tap is a single
/// contiguous multiply-add over the whole output plane.
fn conv2d_wide<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, padding: usize) -> Tensor<T> {
    let (b, cin, h, w) = x.dims4().expect("checked");
    let (cout, _, kh, kw) = weight.dims4().expect("checked");
    let oh = h + 2 * padding + 1 - kh;
    let ow = w + 2 * padding + 1 - kw;
    let wp = w + 2 * padding;
    let (xp, pstride) = pad_planes(x.data(), b * cin, h, w, padding, kw);
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * oh * ow];
    let mut wide = vec![T::zero(); oh * wp];
    for bi in 0..b {
        for oc in 0..cout {
            wide.fill(bias.map_or(T::zero(), |bv| bv.data()[oc]));
            for ic in 0..cin {
                let plane = &xp[(bi * cin + ic) * pstride..][..pstride];
                for ky in 0..kh {
                    let taps = &wd[((oc * cin + ic) * kh + ky) * kw..][..kw];
                    let row = &plane[ky * wp..];
                    if kw == 3 {
                        let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
                        let n = oh * wp;
                        let (a, b2, c) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
                        for i in 0..n {
                            wide[i] += w0 * a[i] + w1 * b2[i] + w2 * c[i];
                        }
                    } else {
                        for (kx, &wv) in taps.iter().enumerate() {
                            let src = &row[kx..][..oh * wp];
                            for (o, &v) in wide.iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(bi * cout + oc) * oh * ow..][..oh * ow];
            for r in 0..oh {
                dst[r * ow..][..ow].copy_from_slice(&wide[r * wp..][..ow]);
            }
        }
    }
    Tensor::from_parts(&[b, cout, oh, ow], out)
}

/// Gradient with respect to the input, given the output gradient.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, cout, oh, ow) = grad_out.dims4()?;
    let (wcout, cin, kh, kw) = weight.dims4()?;
    let &[_, _, h, w] = input_shape else {
        return Err(Error::invalid("conv2d_backward_input", "input must be 4-D"));
    };
    if wcout != cout {
        return Err(Error::shape("conv2d_backward_input", grad_out.shape(), weight.shape()));
    }
    if stride == 1 && padding < kh && padding < kw && kh == kw {
        let wd = weight.data();
        let flipped = Tensor::from_fn(&[cin, cout, kh, kw], |i| {
            let (ic, rest) = (i / (cout * kh * kw), i % (cout * kh * kw));
            let (oc, k) = (rest / (kh * kw), rest % (kh * kw));
            let (ky, kx) = (k / kw, k % kw);
            wd[((oc * cin + ic) * kh + kh - 1 - ky) * kw + kw - 1 - kx]
        });
        let g = conv2d_wide(grad_out, &flipped, None, kh - 1 - padding);
        if g.shape() == input_shape {
            return Ok(g);
        }
    }
    let mut gx = vec![T::zero(); b * cin * h * w];
    let gd = grad_out.data();
    let wd = weight.data();
    for bi in 0..b {
        for ic in 0..cin {
            let gin_plane = &mut gx[(bi * cin + ic) * h * w..][..h * w];
            for oc in 0..cout {
                let g_plane = &gd[(bi * cout + oc) * oh * ow..][..oh * ow];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                    for kx in 0..kw {
                        let wv = wd[((oc * cin + ic) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let n = ox1 - ox0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow + ox0..][..n];
                            let ix0 = ox0 * stride + kx - padding;
                            let in_row = &mut gin_plane[iy * w..][..w];
                            if stride == 1 {
                                for (i, &g) in in_row[ix0..ix0 + n].iter_mut().zip(g_row) {
                                    *i += wv * g;
                                }
                            } else {
                                for (i, &g) in in_row[ix0..].iter_mut().step_by(stride).zip(g_row) {
                                    *i += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, gx))
}

/// Gradient with respect to the kernel, given the input and output gradient.
pub fn conv2d_backward_weight<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, cout, oh, ow) = grad_out.dims4()?;
    let (_, cin, h, w) = x.dims4()?;
    let &[_, _, kh, kw] = weight_shape else {
        return Err(Error::invalid("conv2d_backward_weight", "weight must be 4-D"));
    };
    if stride == 1 {
        return Ok(conv2d_backward_weight_wide(grad_out, x, weight_shape, padding));
    }
    let mut gw = vec![T::zero(); cout * cin * kh * kw];
    let gd = grad_out.data();
    let xd = x.data();
    for oc in 0..cout {
        for ic in 0..cin {
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let n = ox1 - ox0;
                    let ix0 = ox0 * stride + kx - padding;
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let g_plane = &gd[(bi * cout + oc) * oh * ow..][..oh * ow];
                        let in_plane = &xd[(bi * cin + ic) * h * w..][..h * w];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow + ox0..][..n];
                            let in_row = &in_plane[iy * w..][..w];
                            if stride == 1 {
                                acc += dot(g_row, &in_row[ix0..ix0 + n]);
                            } else {
                                acc += g_row
                                    .iter()
                                    .zip(in_row[ix0..].iter().step_by(stride))
                                    .map(|(&g, &i)| g * i)
                                    .sum::<T>();
                            }
                        }
                    }
                    gw[((oc * cin + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(weight_shape, gw))
}

fn conv2d_backward_weight_wide<T: Real>(grad_out: &Tensor<T>, x: &Tensor<T>, weight_shape: &[usize], padding: usize) -> Tensor<T> {
    let (b, cout, oh, ow) = grad_out.dims4().expect("checked");
    let (_, cin, h, w) = x.dims4().expect("checked");
    let (kh, kw) = (weight_shape[2], weight_shape[3]);
    let wp = w + 2 * padding;
    let (xp, pstride) = pad_planes(x.data(), b * cin, h, w, padding, kw);
    // output gradient laid out on wide rows, zero in the extra columns
    let mut gwide = vec![T::zero(); b * cout * oh * wp];
    for (src, dst) in grad_out.data().chunks(oh * ow).zip(gwide.chunks_mut(oh * wp)) {
        for r in 0..oh {
            dst[r * wp..][..ow].copy_from_slice(&src[r * ow..][..ow]);
        }
    }
    let mut gw = vec![T::zero(); cout * cin * kh * kw];
    for bi in 0..b {
        for oc in 0..cout {
            let g = &gwide[(bi * cout + oc) * oh * wp..][..oh * wp];
            for ic in 0..cin {
                let plane = &xp[(bi * cin + ic) * pstride..][..pstride];
                for ky in 0..kh {
                    let base = ((oc * cin + ic) * kh + ky) * kw;
                    for kx in 0..kw {
                        gw[base + kx] += dot(g, &plane[ky * wp + kx..][..oh * wp]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(weight_shape, gw)
}
