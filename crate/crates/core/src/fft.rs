//! Complex FFT of arbitrary length and the real 2-D transform pair.
//!
//! Power-of-two lengths use an iterative radix-2 kernel; every other
//! length goes through Bluestein's chirp-z reformulation on top of it.
//! The real transform keeps the half spectrum along the width axis
//! (`W / 2 + 1` bins) and runs a full complex transform along height.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Scaling convention of the real 2-D transform pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FftNorm {
    /// Forward unscaled, inverse scaled by `1 / (H W)`.
    Backward,
    /// Both directions scaled by `1 / sqrt(H W)`; Parseval holds exactly.
    Ortho,
}

impl FftNorm {
    fn scales<T: Real>(self, h: usize, w: usize) -> (T, T) {
        let n = (h * w) as f64;
        match self {
            FftNorm::Backward => (T::one(), T::of(1.0 / n)),
            FftNorm::Ortho => {
                let s = T::of(1.0 / libm::sqrt(n));
                (s, s)
            }
        }
    }
}

enum Algo<T> {
    Trivial,
    Radix2 {
        twiddles: Vec<Complex<T>>,
        rev: Vec<usize>,
    },
    Bluestein {
        chirp: Vec<Complex<T>>,
        kernel: Vec<Complex<T>>,
        inner: Box<Fft<T>>,
    },
}

/// An FFT plan for one length.
pub struct Fft<T> {
    n: usize,
    algo: Algo<T>,
}

fn expi<T: Real>(angle: f64) -> Complex<T> {
    Complex::new(T::of(libm::cos(angle)), T::of(libm::sin(angle)))
}

impl<T: Real> Fft<T> {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let algo = if n == 1 {
            Algo::Trivial
        } else if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            let rev = (0..n)
                .map(|i| i.reverse_bits() >> (usize::BITS - bits))
                .collect();
            let twiddles = (0..n / 2)
                .map(|k| expi(-2.0 * core::f64::consts::PI * k as f64 / n as f64))
                .collect();
            Algo::Radix2 { twiddles, rev }
        } else {
            let m = (2 * n - 1).next_power_of_two();
            // k^2 mod 2n keeps the chirp phase exact for large k
            let chirp: Vec<Complex<T>> = (0..n)
                .map(|k| {
                    let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                    expi(-core::f64::consts::PI * k2 / n as f64)
                })
                .collect();
            let inner = Box::new(Fft::new(m));
            let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
            kernel[0] = chirp[0].conj();
            for k in 1..n {
                kernel[k] = chirp[k].conj();
                kernel[m - k] = chirp[k].conj();
            }
            inner.forward(&mut kernel);
            Algo::Bluestein {
                chirp,
                kernel,
                inner,
            }
        };
        Self { n, algo }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward transform, `X_k = sum_j x_j exp(-2 pi i j k / n)`.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n);
        match &self.algo {
            Algo::Trivial => {}
            Algo::Radix2 { twiddles, rev } => radix2(buf, twiddles, rev),
            Algo::Bluestein {
                chirp,
                kernel,
                inner,
            } => {
                let m = kernel.len();
                let mut a = vec![Complex::new(T::zero(), T::zero()); m];
                for ((dst, &x), &c) in a.iter_mut().zip(buf.iter()).zip(chirp) {
                    *dst = x * c;
                }
                inner.forward(&mut a);
                for (v, &k) in a.iter_mut().zip(kernel) {
                    *v = *v * k;
                }
                inner.inverse(&mut a);
                let scale = T::of(1.0 / m as f64);
                for ((dst, &v), &c) in buf.iter_mut().zip(a.iter()).zip(chirp) {
                    *dst = v * c * scale;
                }
            }
        }
    }

    /// Unnormalized inverse transform (positive exponent, no `1/n`).
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        for v in buf.iter_mut() {
            *v = v.conj();
        }
    }
}

fn radix2<T: Real>(buf: &mut [Complex<T>], twiddles: &[Complex<T>], rev: &[usize]) {
    let n = buf.len();
    for i in 0..n {
        let j = rev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * step];
                let u = buf[start + j];
                let v = buf[start + j + half] * w;
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Half-spectrum of a real 4-D tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
    /// `(H, W)` of the real signal the spectrum came from.
    pub spatial_shape: (usize, usize),
}

impl<T: Real> ComplexSpectrum<T> {
    /// Signal energy recovered from the half spectrum (each interior
    /// column stands for itself and its conjugate mirror).
    pub fn energy(&self) -> T {
        let (_, w) = self.spatial_shape;
        let wh = w / 2 + 1;
        let mut total = T::zero();
        for (i, (&re, &im)) in self.real.data().iter().zip(self.imag.data()).enumerate() {
            total += hermitian_weight::<T>(i % wh, w) * (re * re + im * im);
        }
        total
    }
}

/// 1 for the DC (and Nyquist, for even widths) column, 2 otherwise.
#[inline]
fn hermitian_weight<T: Real>(l: usize, w: usize) -> T {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        T::one()
    } else {
        T::of(2.0)
    }
}

/// Plans for one `(H, W)` real transform.
pub struct Rfft2Plan<T> {
    h: usize,
    w: usize,
    rows: Fft<T>,
    cols: Fft<T>,
}

impl<T: Real> Rfft2Plan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            rows: Fft::new(w),
            cols: Fft::new(h),
        }
    }

    pub fn half_width(&self) -> usize {
        self.w / 2 + 1
    }

    /// Unnormalized forward transform of one plane into `(re, im)` of size `H × (W/2+1)`.
    pub fn forward_plane(&self, input: &[T], re: &mut [T], im: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.half_width());
        let mut spec = vec![Complex::new(T::zero(), T::zero()); h * wh];
        let mut row = vec![Complex::new(T::zero(), T::zero()); w];
        for y in 0..h {
            for (c, &v) in row.iter_mut().zip(&input[y * w..][..w]) {
                *c = Complex::new(v, T::zero());
            }
            self.rows.forward(&mut row);
            spec[y * wh..][..wh].copy_from_slice(&row[..wh]);
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for l in 0..wh {
            for y in 0..h {
                col[y] = spec[y * wh + l];
            }
            self.cols.forward(&mut col);
            for y in 0..h {
                re[y * wh + l] = col[y].re;
                im[y * wh + l] = col[y].im;
            }
        }
    }

    /// Unnormalized inverse: complex inverse along height, then the
    /// Hermitian-completed inverse along width (imaginary parts of the DC
    /// and Nyquist columns are ignored).
    pub fn inverse_plane(&self, re: &[T], im: &[T], out: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.half_width());
        let mut spec = vec![Complex::new(T::zero(), T::zero()); h * wh];
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for l in 0..wh {
            for y in 0..h {
                col[y] = Complex::new(re[y * wh + l], im[y * wh + l]);
            }
            self.cols.inverse(&mut col);
            for y in 0..h {
                spec[y * wh + l] = col[y];
            }
        }
        let mut row = vec![Complex::new(T::zero(), T::zero()); w];
        for y in 0..h {
            let src = &spec[y * wh..][..wh];
            row[..wh].copy_from_slice(src);
            for l in wh..w {
                row[l] = src[w - l].conj();
            }
            self.rows.inverse(&mut row);
            for (o, c) in out[y * w..][..w].iter_mut().zip(&row) {
                *o = c.re;
            }
        }
    }
}

fn check_spatial(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(op, alloc::format!("spatial size {h}x{w} below 2x2")));
    }
    Ok(())
}

/// Real 2-D FFT over the two trailing axes of a (B, C, H, W) tensor.
pub fn rfft2<T: Real>(x: &Tensor<T>, norm: FftNorm) -> Result<ComplexSpectrum<T>> {
    let (b, c, h, w) = x.dims4()?;
    check_spatial("rfft2", h, w)?;
    let plan = Rfft2Plan::new(h, w);
    let wh = plan.half_width();
    let (scale, _) = norm.scales::<T>(h, w);
    let mut re = vec![T::zero(); b * c * h * wh];
    let mut im = vec![T::zero(); b * c * h * wh];
    for ((src, r), i) in x
        .data()
        .chunks(h * w)
        .zip(re.chunks_mut(h * wh))
        .zip(im.chunks_mut(h * wh))
    {
        plan.forward_plane(src, r, i);
    }
    if scale != T::one() {
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
    }
    Ok(ComplexSpectrum {
        real: Tensor::from_parts(&[b, c, h, wh], re),
        imag: Tensor::from_parts(&[b, c, h, wh], im),
        spatial_shape: (h, w),
    })
}

/// Inverse of [`rfft2`] under the same normalization.
pub fn irfft2<T: Real>(s: &ComplexSpectrum<T>, norm: FftNorm) -> Result<Tensor<T>> {
    let (b, c, h, wh) = s.real.dims4()?;
    if s.imag.shape() != s.real.shape() {
        return Err(Error::shape("irfft2", s.real.shape(), s.imag.shape()));
    }
    let (sh, w) = s.spatial_shape;
    if sh != h || w / 2 + 1 != wh {
        return Err(Error::shape("irfft2", s.real.shape(), &[sh, w]));
    }
    check_spatial("irfft2", h, w)?;
    let plan = Rfft2Plan::new(h, w);
    let (_, scale) = norm.scales::<T>(h, w);
    let mut out = vec![T::zero(); b * c * h * w];
    for ((o, r), i) in out
        .chunks_mut(h * w)
        .zip(s.real.data().chunks(h * wh))
        .zip(s.imag.data().chunks(h * wh))
    {
        plan.inverse_plane(r, i, o);
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

/// Stacks real and imaginary parts along channels: C complex → 2C real.
pub fn complex2real<T: Real>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    Tensor::concat_channels(&[&s.real, &s.imag])
}

/// Splits a 2C-channel real tensor back into a C-channel spectrum.
pub fn real2complex<T: Real>(x: &Tensor<T>, spatial_shape: (usize, usize)) -> Result<ComplexSpectrum<T>> {
    let (_, c2, h, wh) = x.dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::invalid("real2complex", alloc::format!("odd channel count {c2}")));
    }
    if spatial_shape.0 != h || spatial_shape.1 / 2 + 1 != wh {
        return Err(Error::shape(
            "real2complex",
            x.shape(),
            &[spatial_shape.0, spatial_shape.1],
        ));
    }
    Ok(ComplexSpectrum {
        real: x.slice_channels(0, c2 / 2)?,
        imag: x.slice_channels(c2 / 2, c2)?,
        spatial_shape,
    })
}

/// `complex2real(rfft2(x))` in one pass: (B, C, H, W) → (B, 2C, H, W/2+1).
pub fn rfft2_stacked<T: Real>(x: &Tensor<T>, norm: FftNorm) -> Result<Tensor<T>> {
    complex2real(&rfft2(x, norm)?)
}

/// `irfft2(real2complex(y))`.
pub fn irfft2_stacked<T: Real>(y: &Tensor<T>, spatial_shape: (usize, usize), norm: FftNorm) -> Result<Tensor<T>> {
    irfft2(&real2complex(y, spatial_shape)?, norm)
}

/// Exact adjoint of [`rfft2_stacked`]: maps a (B, 2C, H, W/2+1) gradient
/// back to (B, C, H, W).
pub fn rfft2_stacked_adjoint<T: Real>(
    grad: &Tensor<T>,
    spatial_shape: (usize, usize),
    norm: FftNorm,
) -> Result<Tensor<T>> {
    let s = real2complex(grad, spatial_shape)?;
    let (b, c, h, wh) = s.real.dims4()?;
    let w = spatial_shape.1;
    let (scale, _) = norm.scales::<T>(h, w);
    let plan = Rfft2Plan::new(h, w);
    let mut re = s.real.into_vec();
    let mut im = s.imag.into_vec();
    for (i, (r, m)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
        let inv = T::one() / hermitian_weight::<T>(i % wh, w);
        *r *= inv;
        *m *= inv;
    }
    let mut out = vec![T::zero(); b * c * h * w];
    for ((o, r), m) in out
        .chunks_mut(h * w)
        .zip(re.chunks(h * wh))
        .zip(im.chunks(h * wh))
    {
        plan.inverse_plane(r, m, o);
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

/// Exact adjoint of [`irfft2_stacked`]: maps a (B, C, H, W) gradient to
/// (B, 2C, H, W/2+1).
pub fn irfft2_stacked_adjoint<T: Real>(grad: &Tensor<T>, norm: FftNorm) -> Result<Tensor<T>> {
    let (_, _, h, w) = grad.dims4()?;
    let (_, scale) = norm.scales::<T>(h, w);
    let mut s = rfft2(grad, FftNorm::Backward)?;
    let wh = w / 2 + 1;
    for part in [&mut s.real, &mut s.imag] {
        for (i, v) in part.data_mut().iter_mut().enumerate() {
            *v *= scale * hermitian_weight::<T>(i % wh, w);
        }
    }
    complex2real(&s)
}

/// Log-amplitude `ln(1 + |F|)` of the full 2-D spectrum of one plane,
/// shifted so the DC term sits at `(H/2, W/2)`.
pub fn log_amplitude_centered<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let rows = Fft::new(w);
    let cols = Fft::new(h);
    let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    for y in 0..h {
        rows.forward(&mut buf[y * w..][..w]);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.forward(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y + h / 2) % h;
            let sx = (x + w / 2) % w;
            out[sy * w + sx] = (T::one() + buf[y * w + x].norm()).ln();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dft(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (j, &v)| {
                    acc + v * expi::<f64>(-2.0 * core::f64::consts::PI * (j * k) as f64 / n as f64)
                })
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_for_many_lengths() {
        for n in 1..=40 {
            let x: Vec<Complex<f64>> = (0..n)
                .map(|i| Complex::new(libm::sin(i as f64 * 1.3), libm::cos(i as f64 * 0.7) - 0.2))
                .collect();
            let mut fast = x.clone();
            Fft::new(n).forward(&mut fast);
            let slow = dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9, "n = {n}");
            }
            Fft::new(n).inverse(&mut fast);
            for (a, b) in fast.iter().zip(&x) {
                assert!((a / n as f64 - b).norm() < 1e-9, "n = {n}");
            }
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 2.5;
        let (h, w) = (6, 5);
        let x = Tensor::<f64>::full(&[1, 1, h, w], c);
        let s = rfft2(&x, FftNorm::Backward).unwrap();
        assert_eq!(s.real.shape(), &[1, 1, h, w / 2 + 1]);
        assert!((s.real.data()[0] - c * (h * w) as f64).abs() < 1e-9);
        for i in 1..s.real.len() {
            assert!(s.real.data()[i].abs() < 1e-9 && s.imag.data()[i].abs() < 1e-9);
        }
    }

    #[test]
    fn delta_has_flat_unit_spectrum() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        x.data_mut()[0] = 1.0;
        let s = rfft2(&x, FftNorm::Backward).unwrap();
        for (&r, &i) in s.real.data().iter().zip(s.imag.data()) {
            assert!(((r * r + i * i).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ortho_parseval_and_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 7, 10], |i| libm::sin(i as f64 * 0.37) + 0.1);
        let s = rfft2(&x, FftNorm::Ortho).unwrap();
        let energy = x.dot(&x).unwrap();
        assert!((s.energy() - energy).abs() < 1e-9 * energy);
        let back = irfft2(&s, FftNorm::Ortho).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn stacking_doubles_channels_and_inverts() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 6], |i| i as f64);
        let s = rfft2(&x, FftNorm::Ortho).unwrap();
        let stacked = complex2real(&s).unwrap();
        assert_eq!(stacked.shape(), &[1, 6, 4, 4]);
        let back = real2complex(&stacked, (4, 6)).unwrap();
        assert_eq!(back, s);
        let odd = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(real2complex(&odd, (4, 6)).is_err());
        assert!(real2complex(&stacked, (4, 8)).is_err());
    }

    #[test]
    fn stacked_adjoints_satisfy_dot_identity() {
        for (h, w) in [(4, 6), (5, 7), (2, 2), (8, 3)] {
            for norm in [FftNorm::Ortho, FftNorm::Backward] {
                let x = Tensor::<f64>::from_fn(&[2, 2, h, w], |i| libm::cos(i as f64 * 0.91));
                let y = rfft2_stacked(&x, norm).unwrap();
                let g = Tensor::from_fn(y.shape(), |i| libm::sin(i as f64 * 0.53 + 0.2));
                let lhs = y.dot(&g).unwrap();
                let rhs = x.dot(&rfft2_stacked_adjoint(&g, (h, w), norm).unwrap()).unwrap();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "rfft {h}x{w}");

                let z = irfft2_stacked(&g, (h, w), norm).unwrap();
                let gz = Tensor::from_fn(z.shape(), |i| libm::cos(i as f64 * 0.29 - 1.0));
                let lhs = z.dot(&gz).unwrap();
                let rhs = g.dot(&irfft2_stacked_adjoint(&gz, norm).unwrap()).unwrap();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "irfft {h}x{w}");
            }
        }
    }

    #[test]
    fn rejects_tiny_planes() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 8]);
        assert!(rfft2(&x, FftNorm::Ortho).is_err());
    }
}
