//! Evaluation under dilated metal masks and traces, and dilation-based
//! augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::losses::{normalize_mu, WindowSpec};
use crate::metrics::{metric_report, rmse};
use crate::nn::{Ctx, ParamStore, Pipeline};
use crate::physics::{dilate_mask, mask_projection, trace_from_projection, DataSample, MetalMask};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const SWEEP_KERNELS: [usize; 4] = [0, 3, 5, 7];

/// The sample with its metal mask dilated by a `k × k` max filter and the
/// trace and mask projection recomputed. The measured sinogram, the clean
/// references and the scoring mask are unchanged.
pub fn dilate_sample<T: Real>(sample: &DataSample<T>, k: usize, geom: &FanBeamGeometry) -> Result<DataSample<T>> {
    if k <= 1 {
        return Ok(sample.clone());
    }
    let mask = dilate_mask(&MetalMask::new(sample.mask.clone())?, k)?;
    let proj = mask_projection(&mask, geom)?;
    let trace = trace_from_projection(&proj.values);
    Ok(DataSample {
        trace: trace.values().clone(),
        mask_projection: proj.values,
        ..sample.clone()
    })
}

/// Trace areas per kernel after checking that each dilated trace contains
/// the previous one. `kernels` must be increasing.
pub fn check_nesting<T: Real>(sample: &DataSample<T>, kernels: &[usize], geom: &FanBeamGeometry) -> Result<Vec<usize>> {
    if kernels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("check_nesting", "kernels must be strictly increasing"));
    }
    let mut areas = Vec::with_capacity(kernels.len());
    let mut prev: Option<Tensor<T>> = None;
    for &k in kernels {
        let t = dilate_sample(sample, k, geom)?.trace;
        if let Some(p) = &prev {
            if p.data().iter().zip(t.data()).any(|(&a, &b)| a > T::zero() && b == T::zero()) {
                return Err(Error::invalid("check_nesting", format!("trace for kernel {k} does not contain the smaller one")));
            }
        }
        areas.push(t.data().iter().filter(|&&v| v > T::zero()).count());
        prev = Some(t);
    }
    Ok(areas)
}

/// Mean with sample (n - 1) and population (n) standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std_sample: f64,
    pub std_population: f64,
}

pub fn spread(values: &[f64]) -> Spread {
    let n = values.len() as f64;
    if values.is_empty() {
        return Spread { mean: f64::NAN, std_sample: f64::NAN, std_population: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Spread {
        mean,
        std_sample: if values.len() > 1 { libm::sqrt(ss / (n - 1.0)) } else { 0.0 },
        std_population: libm::sqrt(ss / n),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSweepRow {
    pub kernel: usize,
    /// Three-window-average RMSE of the spliced reconstruction.
    pub image_rmse: f64,
    /// RMSE of the spliced sinogram against the clean one.
    pub sinogram_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSweep {
    pub rows: Vec<TraceSweepRow>,
    pub image: Spread,
    pub sinogram: Spread,
}

impl TraceSweep {
    /// Image RMSE at the largest kernel over the smallest.
    pub fn degradation(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.image_rmse / a.image_rmse,
            _ => f64::NAN,
        }
    }

    /// One row per quantity, one column per kernel, then `mean` and `std`
    /// (sample standard deviation).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity");
        for r in &self.rows {
            s.push_str(&format!(",trace{}", r.kernel));
        }
        s.push_str(",mean,std\n");
        for (name, pick, sp) in [
            ("image_rmse", (|r: &TraceSweepRow| r.image_rmse) as fn(&TraceSweepRow) -> f64, self.image),
            ("sinogram_rmse", |r: &TraceSweepRow| r.sinogram_rmse, self.sinogram),
        ] {
            s.push_str(name);
            for r in &self.rows {
                s.push_str(&format!(",{:.6}", pick(r)));
            }
            s.push_str(&format!(",{:.6},{:.6}\n", sp.mean, sp.std_sample));
        }
        s
    }
}

fn check_kernels(kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() || kernels.iter().any(|&k| k != 0 && k % 2 == 0) {
        return Err(Error::invalid("sweep", "kernels must be 0 or odd"));
    }
    Ok(())
}

/// Sinogram-stage errors of a pipeline for each dilation kernel, averaged
/// over samples.
pub fn run_trace_sweep<T: Real>(
    pipeline: &Pipeline<T>,
    store: &ParamStore<T>,
    data: &[DataSample<T>],
    geom: &FanBeamGeometry,
    kernels: &[usize],
) -> Result<TraceSweep> {
    check_kernels(kernels)?;
    if data.is_empty() {
        return Err(Error::invalid("trace_sweep", "empty dataset"));
    }
    let mut rows = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let (mut img, mut sino) = (0.0, 0.0);
        for s in data {
            let d = dilate_sample(s, k, geom)?;
            let input = pipeline.prepare(&[&d])?;
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store, false).trainable(&[]);
            let (restored, recon) = pipeline.forward_sinogram(&ctx, &input)?;
            let n = s.clean_image.shape()[0];
            let report = metric_report(&recon.value().reshape(&[n, n])?, &normalize_mu(&s.clean_image), &WindowSpec::ALL, Some(&s.mask))?;
            img += report.mean.rmse;
            let spliced = restored
                .value()
                .reshape(d.trace.shape())?
                .zip_map(&d.trace, |r, m| r * m)?
                .add(&d.corrupted.zip_map(&d.trace, |c, m| c * (T::one() - m))?)?;
            sino += rmse(&spliced, &s.clean_sinogram, None)?;
        }
        let n = data.len() as f64;
        rows.push(TraceSweepRow { kernel: k, image_rmse: img / n, sinogram_rmse: sino / n });
    }
    let image = spread(&rows.iter().map(|r| r.image_rmse).collect::<Vec<_>>());
    let sinogram = spread(&rows.iter().map(|r| r.sinogram_rmse).collect::<Vec<_>>());
    Ok(TraceSweep { rows, image, sinogram })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSweepRow {
    pub kernel: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSweep {
    pub rows: Vec<MaskSweepRow>,
    pub psnr: Spread,
    pub ssim: Spread,
}

impl MaskSweep {
    /// `PSNR/SSIM` per kernel, then `mean±std` with the population
    /// standard deviation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for r in &self.rows {
            s.push_str(&format!(",mask{}", r.kernel));
        }
        s.push_str(",mean,std\n");
        for (name, pick, sp) in [
            ("psnr", (|r: &MaskSweepRow| r.psnr) as fn(&MaskSweepRow) -> f64, self.psnr),
            ("ssim", |r: &MaskSweepRow| r.ssim, self.ssim),
        ] {
            s.push_str(name);
            for r in &self.rows {
                s.push_str(&format!(",{:.6}", pick(r)));
            }
            s.push_str(&format!(",{:.6},{:.6}\n", sp.mean, sp.std_population));
        }
        s
    }
}

/// Final-output PSNR/SSIM (three-window average, metal excluded) of a
/// pipeline for each dilation kernel, averaged over samples.
pub fn run_mask_sweep<T: Real>(
    pipeline: &Pipeline<T>,
    store: &ParamStore<T>,
    data: &[DataSample<T>],
    geom: &FanBeamGeometry,
    kernels: &[usize],
) -> Result<MaskSweep> {
    check_kernels(kernels)?;
    if data.is_empty() {
        return Err(Error::invalid("mask_sweep", "empty dataset"));
    }
    let mut rows = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let (mut psnr, mut ssim) = (0.0, 0.0);
        for s in data {
            let d = dilate_sample(s, k, geom)?;
            let out = pipeline.infer(store, &pipeline.prepare(&[&d])?)?;
            let n = s.clean_image.shape()[0];
            let report = metric_report(&out.fused.reshape(&[n, n])?, &normalize_mu(&s.clean_image), &WindowSpec::ALL, Some(&s.mask))?;
            psnr += report.mean.psnr;
            ssim += report.mean.ssim;
        }
        let n = data.len() as f64;
        rows.push(MaskSweepRow { kernel: k, psnr: psnr / n, ssim: ssim / n });
    }
    let psnr = spread(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
    let ssim = spread(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
    Ok(MaskSweep { rows, psnr, ssim })
}

/// Per-sample kernel choice, uniform over `kernels` and determined by
/// `seed` and the sample index.
pub fn choose_kernels(n: usize, kernels: &[usize], seed: u64) -> Result<Vec<usize>> {
    if kernels.is_empty() {
        return Err(Error::invalid("augment", "no kernels"));
    }
    Ok((0..n)
        .map(|i| kernels[rng::seeded(rng::derive_seed(seed, i as u64)).random_range(0..kernels.len())])
        .collect())
}

/// Replaces each sample's trace and projection by those of a randomly
/// dilated mask.
pub fn augment_with_dilation<T: Real>(data: &[DataSample<T>], kernels: &[usize], geom: &FanBeamGeometry, seed: u64) -> Result<Vec<DataSample<T>>> {
    check_kernels(kernels)?;
    let picks = choose_kernels(data.len(), kernels, seed)?;
    data.iter().zip(picks).map(|(s, k)| dilate_sample(s, k, geom)).collect()
}
