//! Image quality metrics on windowed images in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{window_normalized, WindowSpec};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn plane<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let nd = a.ndim();
    if nd < 2 || a.shape()[..nd - 2].iter().any(|&d| d != 1) {
        return Err(Error::invalid(op, "expected a single 2-D plane"));
    }
    Ok((a.shape()[nd - 2], a.shape()[nd - 1]))
}

fn keep_at<T: Real>(exclude: Option<&Tensor<T>>, i: usize) -> bool {
    exclude.is_none_or(|m| m.data()[i] == T::zero())
}

/// Root mean squared error over pixels where `exclude` is zero.
pub fn rmse<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exclude: Option<&Tensor<T>>) -> Result<f64> {
    plane("rmse", a, b)?;
    if let Some(m) = exclude {
        if m.len() != a.len() {
            return Err(Error::shape("rmse", m.shape(), a.shape()));
        }
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if keep_at(exclude, i) {
            let d = x.f64() - y.f64();
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("rmse", "no pixels left after exclusion"));
    }
    Ok(libm::sqrt(se / n as f64))
}

/// PSNR with peak 1; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exclude: Option<&Tensor<T>>) -> Result<f64> {
    let e = rmse(a, b, exclude)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -20.0 * libm::log10(e) })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable Gaussian filter.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            tmp[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * tmp[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over the valid region (11×11 Gaussian window, σ 1.5,
/// K1 0.01, K2 0.03, dynamic range 1). With `exclude`, windows whose
/// centre pixel is excluded are skipped.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exclude: Option<&Tensor<T>>) -> Result<f64> {
    let (h, w) = plane("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", "image smaller than the 11×11 window"));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, oh, ow) = filter_valid(&x, h, w, &g);
    let (my, ..) = filter_valid(&y, h, w, &g);
    let (sxx, ..) = filter_valid(&prod(&x, &x), h, w, &g);
    let (syy, ..) = filter_valid(&prod(&y, &y), h, w, &g);
    let (sxy, ..) = filter_valid(&prod(&x, &y), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let r = SSIM_WINDOW / 2;
    let (mut total, mut n) = (0.0, 0usize);
    for i in 0..oh {
        for j in 0..ow {
            if !keep_at(exclude, (i + r) * w + j + r) {
                continue;
            }
            let k = i * ow + j;
            let (ux, uy) = (mx[k], my[k]);
            let vx = sxx[k] - ux * ux;
            let vy = syy[k] - uy * uy;
            let cov = sxy[k] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("ssim", "no windows left after exclusion"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-window scores and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub windows: Vec<(WindowSpec, Scores)>,
    pub mean: Scores,
}

/// Mean of finite PSNR values; infinite entries are dropped with a warning
/// (all-infinite input stays infinite).
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < values.len() {
        log::warn!("{} identical-image PSNR value(s) excluded from the average", values.len() - finite.len());
    }
    if finite.is_empty() {
        return f64::INFINITY;
    }
    finite.iter().sum::<f64>() / finite.len() as f64
}

/// Scores of normalized-unit images under each window, averaged.
pub fn metric_report<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, windows: &[WindowSpec], exclude: Option<&Tensor<T>>) -> Result<MetricReport> {
    let mut per = Vec::with_capacity(windows.len());
    for &w in windows {
        let a = window_normalized(pred, w);
        let b = window_normalized(target, w);
        per.push((
            w,
            Scores {
                rmse: rmse(&a, &b, exclude)?,
                psnr: psnr(&a, &b, exclude)?,
                ssim: ssim(&a, &b, exclude)?,
            },
        ));
    }
    let n = per.len() as f64;
    let psnrs: Vec<f64> = per.iter().map(|(_, s)| s.psnr).collect();
    let mean = Scores {
        rmse: per.iter().map(|(_, s)| s.rmse).sum::<f64>() / n,
        psnr: mean_psnr(&psnrs),
        ssim: per.iter().map(|(_, s)| s.ssim).sum::<f64>() / n,
    };
    Ok(MetricReport { windows: per, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(&[n, n], |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn identical_and_offset() {
        let a = random(16, 1);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(&[16, 16]);
        let o = Tensor::full(&[16, 16], 0.1);
        assert!((rmse(&z, &o, None).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr(&z, &o, None).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn symmetry_and_exclusion() {
        let a = random(20, 2);
        let b = random(20, 3);
        assert_eq!(rmse(&a, &b, None).unwrap(), rmse(&b, &a, None).unwrap());
        assert!((ssim(&a, &b, None).unwrap() - ssim(&b, &a, None).unwrap()).abs() < 1e-15);
        let mut c = a.clone();
        let mut mask = Tensor::zeros(&[20, 20]);
        c.data_mut()[5 * 20 + 5] = 9.0;
        mask.data_mut()[5 * 20 + 5] = 1.0;
        assert_eq!(rmse(&a, &c, Some(&mask)).unwrap(), 0.0);
        assert!(rmse(&a, &a, Some(&Tensor::ones(&[20, 20]))).is_err());
    }

    #[test]
    fn report_mean_matches_windows() {
        let a = random(24, 4).map(|v| v * 0.4);
        let b = random(24, 5).map(|v| v * 0.4);
        let r = metric_report(&a, &b, &WindowSpec::ALL, None).unwrap();
        for f in [|s: &Scores| s.rmse, |s: &Scores| s.psnr, |s: &Scores| s.ssim] {
            let m = r.windows.iter().map(|(_, s)| f(s)).sum::<f64>() / 3.0;
            assert!((m - f(&r.mean)).abs() < 1e-9);
        }
        assert_eq!(mean_psnr(&[10.0, f64::INFINITY, 20.0]), 15.0);
    }
}
