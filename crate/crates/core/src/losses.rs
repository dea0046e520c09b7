//! Training objectives and the CT display windows they are evaluated under.
//!
//! Image-domain network tensors live in *normalized units*: the full
//! window's affine map from HU, `v = (HU + 500) / 3000`, so that air is
//! `-1/6`, water `1/6` and the window itself spans `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{CtImage, Units, MU_WATER};
use crate::real::Real;
use crate::rng;
use crate::tensor::{self, Tensor};

/// Display window in HU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    pub const FULL: WindowSpec = WindowSpec { level: 1000.0, width: 3000.0 };
    pub const LUNG: WindowSpec = WindowSpec { level: -600.0, width: 800.0 };
    pub const SOFT_TISSUE: WindowSpec = WindowSpec { level: 50.0, width: 500.0 };
    pub const ALL: [WindowSpec; 3] = [Self::FULL, Self::LUNG, Self::SOFT_TISSUE];

    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::invalid("window", "width must be positive"));
        }
        Ok(Self { level, width })
    }

    pub fn lower(&self) -> f64 {
        self.level - 0.5 * self.width
    }

    /// Maps a HU value into `[0, 1]`.
    pub fn apply_hu(&self, hu: f64) -> f64 {
        ((hu - self.lower()) / self.width).clamp(0.0, 1.0)
    }

    /// `(a, b)` such that this window of a normalized-unit value `v` is
    /// `clamp(a v + b, 0, 1)`.
    pub fn from_normalized(&self) -> (f64, f64) {
        let full = Self::FULL;
        (full.width / self.width, (full.lower() - self.lower()) / self.width)
    }
}

pub fn apply_window<T: Real>(img: &CtImage<T>, w: WindowSpec) -> Result<Tensor<T>> {
    if img.units != Units::Hounsfield {
        return Err(Error::UnitMismatch {
            expected: "HU",
            got: "attenuation",
        });
    }
    Ok(img.values.map(|v| T::of(w.apply_hu(v.f64()))))
}

/// Attenuation (1/cm) to normalized units, without clamping.
pub fn normalize_mu<T: Real>(mu: &Tensor<T>) -> Tensor<T> {
    let (a, b) = mu_to_normalized();
    mu.map(|v| T::of(a) * v + T::of(b))
}

pub fn mu_to_normalized() -> (f64, f64) {
    let full = WindowSpec::FULL;
    // HU = 1000 (mu - mu_w) / mu_w
    let a = 1000.0 / (MU_WATER * full.width);
    let b = (-1000.0 - full.lower()) / full.width;
    (a, b)
}

pub fn hu_from_normalized<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let full = WindowSpec::FULL;
    v.map(|x| T::of(full.lower()) + T::of(full.width) * x)
}

/// Window of a normalized-unit tensor, values in `[0, 1]`.
pub fn window_normalized<T: Real>(v: &Tensor<T>, w: WindowSpec) -> Tensor<T> {
    let (a, b) = w.from_normalized();
    v.map(|x| (T::of(a) * x + T::of(b)).max(T::zero()).min(T::one()))
}

pub fn window_var<'t, T: Real>(v: Var<'t, T>, w: WindowSpec) -> Result<Var<'t, T>> {
    let (a, b) = w.from_normalized();
    v.affine(T::of(a), T::of(b))?.clamp(T::zero(), T::one())
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [1.0, 2.0, 1.0, 0.0, 0.0, 0.0, -1.0, -2.0, -1.0];

/// Smoothing constant inside the edge magnitude square root.
pub const SOBEL_EPS: f64 = 1e-8;

fn sobel_weights<T: Real>(channels: usize) -> Tensor<T> {
    // depthwise: one x and one y filter per channel as a dense block-diagonal kernel
    let mut w = vec![T::zero(); 2 * channels * channels * 9];
    for c in 0..channels {
        for k in 0..9 {
            w[((2 * c) * channels + c) * 9 + k] = T::of(SOBEL_X[k]);
            w[((2 * c + 1) * channels + c) * 9 + k] = T::of(SOBEL_Y[k]);
        }
    }
    Tensor::from_parts(&[2 * channels, channels, 3, 3], w)
}

/// Horizontal and vertical Sobel responses with reflect padding, each of
/// shape `(B, C, H, W)`.
pub fn sobel_xy<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let padded = tensor::pad_reflect(x, [1, 1, 1, 1])?;
    let g = tensor::conv2d(&padded, &sobel_weights(c), None, 1, 0)?;
    let plane = h * w;
    let mut gx = Vec::with_capacity(b * c * plane);
    let mut gy = Vec::with_capacity(b * c * plane);
    for chunk in g.data().chunks(2 * plane) {
        gx.extend_from_slice(&chunk[..plane]);
        gy.extend_from_slice(&chunk[plane..]);
    }
    Ok((
        Tensor::new(&[b, c, h, w], gx)?,
        Tensor::new(&[b, c, h, w], gy)?,
    ))
}

/// Edge magnitude `sqrt(gx² + gy² + ε) - sqrt(ε)`.
pub fn sobel_edge<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (gx, gy) = sobel_xy(x)?;
    let eps = T::of(SOBEL_EPS);
    gx.zip_map(&gy, |a, b| (a * a + b * b + eps).sqrt() - eps.sqrt())
}

pub fn sobel_edge_var<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (b, c, h, w) = x.value().dims4()?;
    let weights = x.tape().constant(sobel_weights(c));
    let g = x.pad_reflect([1, 1, 1, 1])?.conv2d(weights, None, 1, 0)?;
    let sq = g.square()?;
    // channel pairs (2c, 2c+1) are the x and y responses of channel c
    let mut mags = Vec::with_capacity(c);
    for k in 0..c {
        let pair = sq.slice_channels(2 * k, 2 * k + 2)?;
        let summed = pair.slice_channels(0, 1)?.add(pair.slice_channels(1, 2)?)?;
        mags.push(summed);
    }
    let total = if c == 1 { mags[0] } else { Var::concat(&mags)? };
    debug_assert_eq!(total.shape(), [b, c, h, w]);
    let eps = T::of(SOBEL_EPS);
    total.affine(T::one(), eps)?.sqrt()?.affine(T::one(), -eps.sqrt())
}

/// Layer of the fixed perceptual feature stack.
#[derive(Clone, Debug, PartialEq)]
enum Layer<T> {
    Conv(Tensor<T>),
    Relu,
    MaxPool,
}

/// Fixed random convolutional feature extractor with taps after layers
/// 2, 4 and 7 of `conv relu conv relu pool conv relu conv`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    layers: Vec<Layer<T>>,
    taps: Vec<usize>,
}

impl<T: Real> FeatureExtractor<T> {
    pub const TAPS: [usize; 3] = [2, 4, 7];

    pub fn new(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut conv = |cin: usize, cout: usize| {
            let std = libm::sqrt(2.0 / (cin * 9) as f64);
            let normal = Normal::new(0.0, std).expect("positive std");
            Layer::Conv(Tensor::from_fn(&[cout, cin, 3, 3], |_| T::of(normal.sample(&mut r))))
        };
        let layers = vec![
            conv(3, 8),
            Layer::Relu,
            conv(8, 8),
            Layer::Relu,
            Layer::MaxPool,
            conv(8, 16),
            Layer::Relu,
            conv(16, 16),
        ];
        Self {
            layers,
            taps: Self::TAPS.to_vec(),
        }
    }

    /// Tapped features of a `(B, 3, H, W)` input.
    pub fn features<'t>(&self, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv(w) => h.conv2d(x.tape().constant(w.clone()), None, 1, 1)?,
                Layer::Relu => h.relu()?,
                Layer::MaxPool => h.maxpool2()?,
            };
            if self.taps.contains(&i) {
                out.push(h);
            }
        }
        Ok(out)
    }

    /// Sum over taps of the mean squared feature difference.
    pub fn distance<'t>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Var<'t, T>> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = x.mse(y)?;
            total = Some(match total {
                Some(t) => t.add(d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::invalid("perceptual", "no taps"))
    }
}

/// Sinogram restoration objective: L1 on the sinogram plus smooth L1 on
/// the reconstruction (normalized units).
pub fn sinogram_loss<'t, T: Real>(restored: Var<'t, T>, clean_sinogram: Var<'t, T>, recon: Var<'t, T>, clean_image: Var<'t, T>) -> Result<Var<'t, T>> {
    restored.l1(clean_sinogram)?.add(recon.smooth_l1(clean_image, T::one())?)
}

pub fn unet_loss<'t, T: Real>(unet: Var<'t, T>, clean_image: Var<'t, T>) -> Result<Var<'t, T>> {
    unet.l1(clean_image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLossConfig {
    pub windows: Vec<WindowSpec>,
    pub pixel_weight: f64,
    pub edge_weight: f64,
    pub perceptual_weight: f64,
}

impl Default for FusionLossConfig {
    fn default() -> Self {
        Self {
            windows: WindowSpec::ALL.to_vec(),
            pixel_weight: 1.0,
            edge_weight: 1.0,
            perceptual_weight: 0.1,
        }
    }
}

/// Multi-window image objective: per-window L1 and Sobel-edge L1 summed
/// over windows plus the weighted perceptual distance of the stacked
/// windows. Inputs are `(B, 1, H, W)` in normalized units.
pub fn fusion_loss<'t, T: Real>(fused: Var<'t, T>, clean_image: Var<'t, T>, cfg: &FusionLossConfig, extractor: &FeatureExtractor<T>) -> Result<Var<'t, T>> {
    let tape = fused.tape();
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    let mut stack_r = Vec::with_capacity(cfg.windows.len());
    let mut stack_gt = Vec::with_capacity(cfg.windows.len());
    for &w in &cfg.windows {
        let a = window_var(fused, w)?;
        let b = window_var(clean_image, w)?;
        if cfg.pixel_weight != 0.0 {
            total = total.add(a.l1(b)?.scale(T::of(cfg.pixel_weight))?)?;
        }
        if cfg.edge_weight != 0.0 {
            let e = sobel_edge_var(a)?.l1(sobel_edge_var(b)?)?;
            total = total.add(e.scale(T::of(cfg.edge_weight))?)?;
        }
        stack_r.push(a);
        stack_gt.push(b);
    }
    if cfg.perceptual_weight != 0.0 {
        if stack_r.len() != 3 {
            return Err(Error::invalid("fusion_loss", "the perceptual term needs exactly three windows"));
        }
        let p = extractor.distance(Var::concat(&stack_r)?, Var::concat(&stack_gt)?)?;
        total = total.add(p.scale(T::of(cfg.perceptual_weight))?)?;
    }
    Ok(total)
}

/// Every intermediate the joint objective needs.
#[derive(Clone, Copy)]
pub struct LossInputs<'t, T> {
    pub restored: Var<'t, T>,
    pub clean_sinogram: Var<'t, T>,
    pub recon: Var<'t, T>,
    pub unet: Var<'t, T>,
    pub fused: Var<'t, T>,
    pub clean_image: Var<'t, T>,
}

/// Individual terms and their equally weighted sum.
pub struct LossTerms<'t, T> {
    pub sinogram: Var<'t, T>,
    pub unet: Var<'t, T>,
    pub fusion: Var<'t, T>,
    pub total: Var<'t, T>,
}

pub fn total_loss<'t, T: Real>(inputs: LossInputs<'t, T>, cfg: &FusionLossConfig, extractor: &FeatureExtractor<T>) -> Result<LossTerms<'t, T>> {
    let sinogram = sinogram_loss(inputs.restored, inputs.clean_sinogram, inputs.recon, inputs.clean_image)?;
    let unet = unet_loss(inputs.unet, inputs.clean_image)?;
    let fusion = fusion_loss(inputs.fused, inputs.clean_image, cfg, extractor)?;
    let total = sinogram.add(unet)?.add(fusion)?;
    Ok(LossTerms { sinogram, unet, fusion, total })
}

/// Convenience evaluation of [`fusion_loss`] on plain tensors.
pub fn fusion_loss_value<T: Real>(fused: &Tensor<T>, clean_image: &Tensor<T>, cfg: &FusionLossConfig, extractor: &FeatureExtractor<T>) -> Result<T> {
    let tape = Tape::new();
    let a = tape.constant(fused.clone());
    let b = tape.constant(clean_image.clone());
    Ok(fusion_loss(a, b, cfg, extractor)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape, |_| r.random_range(lo..hi))
    }

    #[test]
    fn window_arithmetic() {
        let w = WindowSpec::SOFT_TISSUE;
        assert_eq!(w.apply_hu(50.0), 0.5);
        assert_eq!(w.apply_hu(-200.0), 0.0);
        assert_eq!(w.apply_hu(-900.0), 0.0);
        assert_eq!(w.apply_hu(300.0), 1.0);
        assert!(WindowSpec::new(0.0, 0.0).is_err());
        let img = CtImage {
            values: Tensor::new(&[2], vec![-600.0, 50.0]).unwrap(),
            units: Units::Hounsfield,
            pixel_spacing: 1.0,
        };
        assert_eq!(apply_window(&img, WindowSpec::LUNG).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn normalized_units_round_trip_through_hu() {
        let mu = Tensor::new(&[3], vec![0.0, MU_WATER, 0.5]).unwrap();
        let v = normalize_mu(&mu);
        assert!((v.data()[0] + 1.0 / 6.0).abs() < 1e-12);
        assert!((v.data()[1] - 1.0 / 6.0).abs() < 1e-12);
        let hu = hu_from_normalized(&v);
        for (h, m) in hu.data().iter().zip(mu.data()) {
            assert!((h - 1000.0 * (m - MU_WATER) / MU_WATER).abs() < 1e-9);
        }
        for w in WindowSpec::ALL {
            let direct: Vec<f64> = hu.data().iter().map(|&h| w.apply_hu(h)).collect();
            let via = window_normalized(&v, w);
            for (a, b) in direct.iter().zip(via.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_on_constant_step_and_rotation() {
        let c = Tensor::<f64>::full(&[1, 1, 6, 6], 3.0);
        assert!(sobel_edge(&c).unwrap().data().iter().all(|&v| v.abs() < 1e-12));
        let h = 0.7;
        let step = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| if i % 6 >= 3 { h } else { 0.0 });
        let (gx, gy) = sobel_xy(&step).unwrap();
        let max = gx.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!((max - 4.0 * h).abs() < 1e-12);
        assert!(gy.data().iter().all(|&v| v.abs() < 1e-12));
        // transpose the image: x and y responses swap (up to sign)
        let img = random(&[1, 1, 7, 7], 3, 0.0, 1.0);
        let t = Tensor::from_fn(&[1, 1, 7, 7], |i| img.data()[(i % 7) * 7 + i / 7]);
        let (ax, ay) = sobel_xy(&img).unwrap();
        let (bx, by) = sobel_xy(&t).unwrap();
        for i in 0..49 {
            let j = (i % 7) * 7 + i / 7;
            assert!((ax.data()[i].abs() - by.data()[j].abs()).abs() < 1e-12);
            assert!((ay.data()[i].abs() - bx.data()[j].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_var_matches_plain() {
        let x = random(&[2, 3, 5, 6], 4, -1.0, 1.0);
        let tape = Tape::new();
        let v = sobel_edge_var(tape.constant(x.clone())).unwrap().value();
        assert!(v.max_abs_diff(&sobel_edge(&x).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn sinogram_and_unet_loss_values() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(random(&[1, 1, 6, 5], 1, 0.0, 4.0));
        let x = tape.constant(random(&[1, 1, 4, 4], 2, 0.0, 1.0));
        assert_eq!(sinogram_loss(s, s, x, x).unwrap().value().item(), 0.0);
        let shifted = tape.constant(s.value().map(|v| v + 1.0));
        assert!((sinogram_loss(shifted, s, x, x).unwrap().value().item() - 1.0).abs() < 1e-12);
        let off = tape.constant(x.value().map(|v| v - 0.25));
        assert!((unet_loss(off, x).unwrap().value().item() - 0.25).abs() < 1e-12);
        assert_eq!(unet_loss(x, x).unwrap().value().item(), 0.0);
    }

    #[test]
    fn fusion_loss_degenerate_configs() {
        let ex = FeatureExtractor::<f64>::new(0);
        let a = random(&[1, 1, 12, 12], 5, -0.2, 1.2);
        let b = random(&[1, 1, 12, 12], 6, -0.2, 1.2);
        let cfg = FusionLossConfig::default();
        assert_eq!(fusion_loss_value(&a, &a, &cfg, &ex).unwrap(), 0.0);
        assert!(fusion_loss_value(&a, &b, &cfg, &ex).unwrap() > 0.0);
        let single = FusionLossConfig {
            windows: vec![WindowSpec::SOFT_TISSUE],
            pixel_weight: 1.0,
            edge_weight: 0.0,
            perceptual_weight: 0.0,
        };
        let w = WindowSpec::SOFT_TISSUE;
        let wa = window_normalized(&a, w);
        let wb = window_normalized(&b, w);
        let l1 = wa.sub(&wb).unwrap().data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
        assert!((fusion_loss_value(&a, &b, &single, &ex).unwrap() - l1).abs() < 1e-12);
        // multi-window pixel loss dominates the full-window contribution
        let pixel_only = FusionLossConfig { edge_weight: 0.0, perceptual_weight: 0.0, ..FusionLossConfig::default() };
        let full_only = FusionLossConfig { windows: vec![WindowSpec::FULL], ..pixel_only.clone() };
        assert!(fusion_loss_value(&a, &b, &pixel_only, &ex).unwrap() >= fusion_loss_value(&a, &b, &full_only, &ex).unwrap());
    }

    #[test]
    fn extractor_is_deterministic() {
        assert_eq!(FeatureExtractor::<f64>::new(0), FeatureExtractor::<f64>::new(0));
        assert_ne!(FeatureExtractor::<f64>::new(0), FeatureExtractor::<f64>::new(1));
    }

    #[test]
    fn total_is_sum_of_parts() {
        let ex = FeatureExtractor::<f64>::new(0);
        let cfg = FusionLossConfig::default();
        let tape = Tape::new();
        let c = |t: Tensor<f64>| tape.constant(t);
        let inputs = LossInputs {
            restored: c(random(&[1, 1, 8, 6], 1, 0.0, 3.0)),
            clean_sinogram: c(random(&[1, 1, 8, 6], 2, 0.0, 3.0)),
            recon: c(random(&[1, 1, 8, 8], 3, 0.0, 1.0)),
            unet: c(random(&[1, 1, 8, 8], 4, 0.0, 1.0)),
            fused: c(random(&[1, 1, 8, 8], 5, 0.0, 1.0)),
            clean_image: c(random(&[1, 1, 8, 8], 6, 0.0, 1.0)),
        };
        let terms = total_loss(inputs, &cfg, &ex).unwrap();
        let sino = sinogram_loss(inputs.restored, inputs.clean_sinogram, inputs.recon, inputs.clean_image).unwrap().value().item();
        let unet = unet_loss(inputs.unet, inputs.clean_image).unwrap().value().item();
        let fusion = fusion_loss_value(&inputs.fused.value(), &inputs.clean_image.value(), &cfg, &ex).unwrap();
        assert!((terms.total.value().item() - (sino + unet + fusion)).abs() < 1e-7);
    }

    #[test]
    fn fusion_loss_gradient() {
        let ex = FeatureExtractor::<f64>::new(0);
        let cfg = FusionLossConfig::default();
        // keep values inside every window's linear range to stay off clamp kinks
        let gt = random(&[1, 1, 8, 8], 8, 0.15, 0.2);
        let x = random(&[1, 1, 8, 8], 7, 0.15, 0.2);
        let err = grad_check(
            |tape, v| fusion_loss(v, tape.constant(gt.clone()), &cfg, &ex),
            &x,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
