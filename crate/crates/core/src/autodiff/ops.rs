//! Differentiable operations on [`Var`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::Var;
use crate::error::{Error, Result};
use crate::fft::{self, FftNorm};
use crate::real::Real;
use crate::tensor::{self, Tensor};

/// `Some(true)` when `b` broadcasts over the batch axis of `a`.
fn batch_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if a.len() == b.len() && a.len() > 1 && b[0] == 1 && a[1..] == b[1..] {
        return Ok(true);
    }
    Err(Error::shape(op, a, b))
}

fn sum_over_batch<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let per: usize = target.iter().product();
    let mut out = vec![T::zero(); per];
    for chunk in g.data().chunks(per) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(target, out)
}

fn tile_batch<T: Real>(b: &Tensor<T>, batch: usize) -> Tensor<T> {
    let mut shape = b.shape().to_vec();
    shape[0] = batch;
    let mut data = Vec::with_capacity(b.len() * batch);
    for _ in 0..batch {
        data.extend_from_slice(b.data());
    }
    Tensor::from_parts(&shape, data)
}

fn scalar_like<T: Real>(v: T) -> Tensor<T> {
    Tensor::scalar(v)
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        value: Tensor<T>,
        f: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Result<Self> {
        self.tape
            .record(op, value, &[self], Box::new(move |g, _| Ok(vec![Some(f(g)?)])))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let bc = batch_broadcast("add", a.shape(), b.shape())?;
        let b_full = if bc { tile_batch(&b, a.shape()[0]) } else { b.clone() };
        let out = a.add(&b_full)?;
        let b_shape = b.shape().to_vec();
        self.tape.record(
            "add",
            out,
            &[self, other],
            Box::new(move |g, _| {
                let gb = if bc { sum_over_batch(g, &b_shape) } else { g.clone() };
                Ok(vec![Some(g.clone()), Some(gb)])
            }),
        )
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let bc = batch_broadcast("sub", a.shape(), b.shape())?;
        let b_full = if bc { tile_batch(&b, a.shape()[0]) } else { b.clone() };
        let out = a.sub(&b_full)?;
        let b_shape = b.shape().to_vec();
        self.tape.record(
            "sub",
            out,
            &[self, other],
            Box::new(move |g, _| {
                let neg = g.scale(-T::one());
                let gb = if bc { sum_over_batch(&neg, &b_shape) } else { neg };
                Ok(vec![Some(g.clone()), Some(gb)])
            }),
        )
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let bc = batch_broadcast("mul", a.shape(), b.shape())?;
        let b_full = if bc { tile_batch(&b, a.shape()[0]) } else { b.clone() };
        let out = a.mul(&b_full)?;
        let b_shape = b.shape().to_vec();
        self.tape.record(
            "mul",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = if needs[0] { Some(g.mul(&b_full)?) } else { None };
                let gb = if needs[1] {
                    let full = g.mul(&a)?;
                    Some(if bc { sum_over_batch(&full, &b_shape) } else { full })
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(self, s: T) -> Result<Self> {
        let out = self.value().scale(s);
        self.unary("scale", out, move |g| Ok(g.scale(s)))
    }

    /// Elementwise `a * x + b`.
    pub fn affine(self, a: T, b: T) -> Result<Self> {
        let out = self.value().map(|v| a * v + b);
        self.unary("affine", out, move |g| Ok(g.scale(a)))
    }

    pub fn relu(self) -> Result<Self> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary("relu", out, move |g| {
            g.zip_map(&x, |g, v| if v > T::zero() { g } else { T::zero() })
        })
    }

    pub fn square(self) -> Result<Self> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::of(2.0);
        self.unary("square", out, move |g| g.zip_map(&x, |g, v| two * v * g))
    }

    pub fn sqrt(self) -> Result<Self> {
        let x = self.value();
        if x.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        let out = x.map(|v| v.sqrt());
        let y = out.clone();
        let half = T::of(0.5);
        self.unary("sqrt", out, move |g| g.zip_map(&y, |g, s| half * g / s))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: T, hi: T) -> Result<Self> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.unary("clamp", out, move |g| {
            g.zip_map(&x, |g, v| if v >= lo && v <= hi { g } else { T::zero() })
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshape(shape)?;
        self.unary("reshape", out, move |g| g.reshape(&old))
    }

    pub fn sum(self) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary("sum", scalar_like(x.sum()), move |g| {
            Ok(Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean(self) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = T::of(x.len() as f64);
        self.unary("mean", scalar_like(x.sum() / n), move |g| {
            Ok(Tensor::full(&shape, g.item() / n))
        })
    }

    fn residual_loss(
        self,
        target: Self,
        op: &'static str,
        value: impl Fn(T) -> T,
        slope: impl Fn(T) -> T + 'static,
    ) -> Result<Self> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let d = a.sub(&b)?;
        let n = T::of(d.len() as f64);
        let loss = d.data().iter().map(|&v| value(v)).sum::<T>() / n;
        self.tape.record(
            op,
            scalar_like(loss),
            &[self, target],
            Box::new(move |g, needs| {
                let s = g.item() / n;
                let ga = d.map(|v| slope(v) * s);
                let gb = needs[1].then(|| ga.scale(-T::one()));
                Ok(vec![Some(ga), gb])
            }),
        )
    }

    /// Mean absolute error.
    pub fn l1(self, target: Self) -> Result<Self> {
        self.residual_loss(target, "l1", |d| d.abs(), |d| {
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Mean Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(self, target: Self, beta: T) -> Result<Self> {
        let half = T::of(0.5);
        self.residual_loss(
            target,
            "smooth_l1",
            move |d| {
                let a = d.abs();
                if a < beta {
                    half * d * d / beta
                } else {
                    a - half * beta
                }
            },
            move |d| {
                if d.abs() < beta {
                    d / beta
                } else if d > T::zero() {
                    T::one()
                } else {
                    -T::one()
                }
            },
        )
    }

    /// Mean squared error.
    pub fn mse(self, target: Self) -> Result<Self> {
        let two = T::of(2.0);
        self.residual_loss(target, "mse", |d| d * d, move |d| two * d)
    }

    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, padding: usize) -> Result<Self> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = tensor::conv2d(&x, &w, b.as_ref(), stride, padding)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.record(
            "conv2d",
            out,
            &parents,
            Box::new(move |g, needs| {
                let gx = if needs[0] {
                    Some(tensor::conv2d_backward_input(g, &w, x.shape(), stride, padding)?)
                } else {
                    None
                };
                let gw = if needs[1] {
                    Some(tensor::conv2d_backward_weight(g, &x, w.shape(), stride, padding)?)
                } else {
                    None
                };
                let mut out = vec![gx, gw];
                if needs.len() > 2 {
                    let (bsz, c, h, wd) = g.dims4()?;
                    let mut gb = vec![T::zero(); c];
                    for bi in 0..bsz {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            *acc += g.data()[(bi * c + ci) * h * wd..][..h * wd].iter().copied().sum::<T>();
                        }
                    }
                    out.push(Some(Tensor::from_parts(&[c], gb)));
                }
                Ok(out)
            }),
        )
    }

    /// Batch normalization with batch statistics. Also returns the batch
    /// mean and the unbiased batch variance for running-stat updates.
    pub fn batch_norm_train(self, gamma: Self, beta: Self, eps: T) -> Result<(Self, Vec<T>, Vec<T>)> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.len() != c || bt.len() != c {
            return Err(Error::shape("batch_norm", x.shape(), gm.shape()));
        }
        let plane = h * w;
        let n = b * plane;
        let nt = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += x.data()[(bi * c + ci) * plane..][..plane].iter().copied().sum::<T>();
            }
            let m = s / nt;
            let mut v = T::zero();
            for bi in 0..b {
                v += x.data()[(bi * c + ci) * plane..][..plane]
                    .iter()
                    .map(|&u| (u - m) * (u - m))
                    .sum::<T>();
            }
            mean[ci] = m;
            var[ci] = v / nt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gm.data()[ci] * xh + bt.data()[ci];
                }
            }
        }
        let xhat = Tensor::from_parts(x.shape(), xhat);
        let unbiased: Vec<T> = if n > 1 {
            var.iter().map(|&v| v * nt / T::of((n - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let shape = x.shape().to_vec();
        let y = self.tape.record(
            "batch_norm",
            Tensor::from_parts(&shape, out),
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for i in off..off + plane {
                            sum_g[ci] += g.data()[i];
                            sum_gx[ci] += g.data()[i] * xhat.data()[i];
                        }
                    }
                }
                let gx = if needs[0] {
                    let mut gx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let k = gm.data()[ci] * inv_std[ci] / nt;
                            let off = (bi * c + ci) * plane;
                            for i in off..off + plane {
                                gx[i] = k * (nt * g.data()[i] - sum_g[ci] - xhat.data()[i] * sum_gx[ci]);
                            }
                        }
                    }
                    Some(Tensor::from_parts(&shape, gx))
                } else {
                    None
                };
                Ok(vec![
                    gx,
                    Some(Tensor::from_parts(&[c], sum_gx)),
                    Some(Tensor::from_parts(&[c], sum_g)),
                ])
            }),
        )?;
        Ok((y, mean, unbiased))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(self, gamma: Self, beta: Self, mean: &[T], var: &[T], eps: T) -> Result<Self> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", x.shape(), gm.shape()));
        }
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let k = gm.data()[ci] * inv_std[ci];
                for i in off..off + plane {
                    out[i] = k * (x.data()[i] - mean[ci]) + bt.data()[ci];
                }
            }
        }
        let shape = x.shape().to_vec();
        self.tape.record(
            "batch_norm_eval",
            Tensor::from_parts(&shape, out),
            &[self, gamma, beta],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                let mut ggm = vec![T::zero(); c];
                let mut gbt = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        let k = gm.data()[ci] * inv_std[ci];
                        for i in off..off + plane {
                            let gi = g.data()[i];
                            gx[i] = k * gi;
                            ggm[ci] += gi * (x.data()[i] - mean[ci]) * inv_std[ci];
                            gbt[ci] += gi;
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::from_parts(&shape, gx)),
                    Some(Tensor::from_parts(&[c], ggm)),
                    Some(Tensor::from_parts(&[c], gbt)),
                ])
            }),
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let out = Tensor::concat_channels(&refs)?;
        let bounds: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        first.tape.record(
            "concat",
            out,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(bounds.len());
                for (&c, &need) in bounds.iter().zip(needs) {
                    grads.push(if need { Some(g.slice_channels(start, start + c)?) } else { None });
                    start += c;
                }
                Ok(grads)
            }),
        )
    }

    pub fn slice_channels(self, start: usize, end: usize) -> Result<Self> {
        let x = self.value();
        let out = x.slice_channels(start, end)?;
        let (b, c, h, w) = x.dims4()?;
        self.unary("slice_channels", out, move |g| {
            let mut full = vec![T::zero(); b * c * h * w];
            let plane = h * w;
            let k = end - start;
            for bi in 0..b {
                full[(bi * c + start) * plane..][..k * plane]
                    .copy_from_slice(&g.data()[bi * k * plane..][..k * plane]);
            }
            Ok(Tensor::from_parts(&[b, c, h, w], full))
        })
    }

    pub fn upsample2(self) -> Result<Self> {
        let out = tensor::upsample2(&self.value())?;
        self.unary("upsample2", out, tensor::upsample2_backward)
    }

    pub fn maxpool2(self) -> Result<Self> {
        let x = self.value();
        let out = tensor::maxpool2(&x)?;
        self.unary("maxpool2", out, move |g| tensor::maxpool2_backward(g, &x))
    }

    /// Reflection padding by `(top, bottom, left, right)`.
    pub fn pad_reflect(self, pads: [usize; 4]) -> Result<Self> {
        let out = tensor::pad_reflect(&self.value(), pads)?;
        self.unary("pad_reflect", out, move |g| tensor::pad_reflect_backward(g, pads))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(self, h: usize, w: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = tensor::crop_bottom_right(&x, h, w)?;
        self.unary("crop", out, move |g| tensor::crop_bottom_right_backward(g, &shape))
    }

    /// `complex2real(rfft2(x))`: (B, C, H, W) → (B, 2C, H, W/2+1).
    pub fn rfft2_stacked(self, norm: FftNorm) -> Result<Self> {
        let x = self.value();
        let (_, _, h, w) = x.dims4()?;
        let out = fft::rfft2_stacked(&x, norm)?;
        self.unary("rfft2", out, move |g| fft::rfft2_stacked_adjoint(g, (h, w), norm))
    }

    /// `irfft2(real2complex(y))`: (B, 2C, H, W/2+1) → (B, C, H, W).
    pub fn irfft2_stacked(self, spatial_shape: (usize, usize), norm: FftNorm) -> Result<Self> {
        let out = fft::irfft2_stacked(&self.value(), spatial_shape, norm)?;
        self.unary("irfft2", out, move |g| fft::irfft2_stacked_adjoint(g, norm))
    }

    /// Applies a linear operator given its forward map and exact transpose.
    pub fn apply_linear(
        self,
        op: &'static str,
        forward: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
        adjoint: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Result<Self> {
        let out = forward(&self.value())?;
        self.unary(op, out, adjoint)
    }
}
