//! Registered central-difference checks for every differentiable building
//! block, run in `f64`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::ffc::{FfcBlock, FourierSkip, FourierUnit, GlobalKind};
use super::layers::{BatchNorm, ConvBnRelu};
use super::params::{Ctx, Init, ParamStore};
use super::pipeline::replace_and_recon;
use super::sinogram::{SinogramMode, SinogramNet, SinogramNetConfig};
use super::unet::{FusionNet, ImageNet};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::fft::FftNorm;
use crate::geometry::{fbp_var, FanBeamGeometry, FbpOperator};
use crate::gradcheck::{grad_check, GradCase};
use crate::losses::{fusion_loss, sinogram_loss, sobel_edge_var, unet_loss, window_var, FeatureExtractor, FusionLossConfig, WindowSpec};
use crate::rng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Scalar probe `Σ r ⊙ y` with fixed random weights.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = random(&y.shape(), seed ^ 0x5eed, -1.0, 1.0);
    y.mul(y.tape().constant(r))?.sum()
}

fn check(f: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>, x: &Tensor<f64>) -> Result<f64> {
    grad_check(|tape, v| probe(f(tape, v)?, 99), x, EPS)
}

fn check_layer<L>(
    build: impl FnOnce(&mut Init<f64>) -> Result<L>,
    forward: impl for<'t> Fn(&L, &Ctx<'t, '_, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    x: &Tensor<f64>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let layer = build(&mut Init::new(&mut store, 3))?;
    check(
        |tape, v| {
            let ctx = Ctx::new(tape, &store, true);
            forward(&layer, &ctx, v)
        },
        x,
    )
}

fn conv_input() -> Result<f64> {
    let w = random(&[3, 2, 3, 3], 1, -1.0, 1.0);
    let b = random(&[3], 2, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for stride in [1, 2] {
        let e = check(
            |t, x| x.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), stride, 1),
            &random(&[2, 2, 7, 6], 3, -1.0, 1.0),
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn conv_weight() -> Result<f64> {
    let x = random(&[2, 2, 7, 6], 3, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for stride in [1, 2] {
        let e = check(|t, w| t.constant(x.clone()).conv2d(w, None, stride, 1), &random(&[3, 2, 3, 3], 1, -1.0, 1.0))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn batch_norm() -> Result<f64> {
    let x = random(&[3, 2, 4, 5], 4, -2.0, 2.0);
    let train = check_layer(|i| BatchNorm::new(i, "bn", 2), |l, c, v| l.forward(c, v), &x)?;
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut Init::new(&mut store, 0), "bn", 2)?;
    store.set("bn.running_mean", Tensor::from_parts(&[2], vec![0.3, -0.2]))?;
    store.set("bn.running_var", Tensor::from_parts(&[2], vec![1.5, 0.5]))?;
    let eval = check(|t, v| bn.forward(&Ctx::new(t, &store, false), v), &x)?;
    // gradients with respect to gamma and beta
    let affine = check(
        |t, g| {
            let xv = t.constant(x.clone());
            let (y, _, _) = xv.batch_norm_train(g, t.constant(Tensor::from_parts(&[2], vec![0.1, -0.3])), 1e-5)?;
            Ok(y)
        },
        &Tensor::from_parts(&[2], vec![1.2, 0.7]),
    )?;
    Ok(train.max(eval).max(affine))
}

fn pointwise() -> Result<f64> {
    let x = random(&[1, 2, 5, 5], 5, -1.0, 1.0);
    let y = random(&[1, 2, 5, 5], 6, -1.0, 1.0);
    let errs = [
        check(|_, v| v.relu(), &x)?,
        check(|_, v| v.clamp(-0.5, 0.5), &x)?,
        check(|_, v| v.square(), &x)?,
        check(|_, v| v.affine(1.5, -0.2)?.sqrt(), &x.map(|v| v.abs() + 0.5))?,
        check(|t, v| v.mul(t.constant(y.clone()))?.add(v)?.sub(t.constant(y.clone())), &x)?,
    ];
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn resampling() -> Result<f64> {
    let x = random(&[1, 2, 6, 5], 7, -1.0, 1.0);
    let errs = [
        check(|_, v| v.upsample2(), &x)?,
        check(|_, v| v.maxpool2(), &x)?,
        check(|_, v| v.pad_reflect([1, 2, 0, 1]), &x)?,
        check(|_, v| v.crop(4, 3), &x)?,
        check(|_, v| Var::concat(&[v.slice_channels(1, 2)?, v]), &x)?,
    ];
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn spectral() -> Result<f64> {
    let x = random(&[1, 2, 6, 5], 8, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for norm in [FftNorm::Backward, FftNorm::Ortho] {
        worst = worst.max(check(|_, v| v.rfft2_stacked(norm), &x)?);
        let spec = random(&[1, 4, 6, 3], 9, -1.0, 1.0);
        worst = worst.max(check(|_, v| v.irfft2_stacked((6, 5), norm), &spec)?);
    }
    Ok(worst)
}

fn conv_bn_relu() -> Result<f64> {
    check_layer(|i| ConvBnRelu::new(i, "cbr", 2, 3, 3, 2), |l, c, v| l.forward(c, v), &random(&[2, 2, 6, 6], 10, -1.0, 1.0))
}

fn fourier_unit() -> Result<f64> {
    check_layer(|i| FourierUnit::new(i, "fu", 2), |l, c, v| l.forward(c, v), &random(&[2, 2, 5, 6], 11, -1.0, 1.0))
}

fn ffc_block() -> Result<f64> {
    check_layer(|i| FfcBlock::new(i, "ffc", 4, GlobalKind::Fourier), |l, c, v| l.forward(c, v), &random(&[2, 4, 6, 5], 12, -1.0, 1.0))
}

fn spatial_block() -> Result<f64> {
    check_layer(|i| FfcBlock::new(i, "sr", 8, GlobalKind::Spatial), |l, c, v| l.forward(c, v), &random(&[2, 8, 4, 4], 13, -1.0, 1.0))
}

fn fourier_skip() -> Result<f64> {
    check_layer(|i| FourierSkip::new(i, "skip", 2), |l, c, v| l.forward(c, v), &random(&[2, 2, 6, 6], 14, -1.0, 1.0))
}

/// Perturbs a zero-initialized head so gradients reach the whole network.
fn perturb_heads(store: &mut ParamStore<f64>) -> Result<()> {
    let names: Vec<_> = store
        .iter()
        .filter(|(n, _, _)| n.ends_with("out.w") || n.ends_with("head.w"))
        .map(|(n, _, t)| (alloc::string::String::from(n), t.shape().to_vec()))
        .collect();
    for (i, (n, shape)) in names.into_iter().enumerate() {
        store.set(&n, random(&shape, 20 + i as u64, -0.3, 0.3))?;
    }
    Ok(())
}

fn sinogram_net() -> Result<f64> {
    let mut store = ParamStore::new();
    let net = SinogramNet::new(&mut Init::new(&mut store, 4), "s", SinogramNetConfig::new(2, SinogramMode::EnhanceTrace))?;
    perturb_heads(&mut store)?;
    check(|t, x| net.forward_var(&Ctx::new(t, &store, true), x), &random(&[2, 2, 8, 6], 15, -1.0, 1.0))
}

fn image_nets() -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, 5);
    let image = ImageNet::new(&mut init, "image", 2)?;
    let fusion = FusionNet::new(&mut init, "fusion", 2)?;
    perturb_heads(&mut store)?;
    let other = random(&[2, 1, 8, 8], 17, 0.05, 0.95);
    check(
        |t, v| {
            let ctx = Ctx::new(t, &store, true);
            let u = image.forward(&ctx, v)?;
            fusion.forward(&ctx, t.constant(other.clone()), u)
        },
        &random(&[2, 1, 8, 8], 18, 0.05, 0.95),
    )
}

fn losses() -> Result<f64> {
    let ex = FeatureExtractor::<f64>::new(0);
    let cfg = FusionLossConfig::default();
    let sino_gt = random(&[1, 1, 6, 5], 30, 0.0, 3.0);
    let img_gt = random(&[1, 1, 8, 8], 31, 0.1, 0.3);
    let recon = random(&[1, 1, 8, 8], 32, 0.1, 0.3);
    let errs = [
        grad_check(
            |t, s| sinogram_loss(s, t.constant(sino_gt.clone()), t.constant(recon.clone()), t.constant(img_gt.clone())),
            &random(&[1, 1, 6, 5], 33, 0.0, 3.0),
            EPS,
        )?,
        grad_check(
            |t, x| sinogram_loss(t.constant(sino_gt.clone()), t.constant(sino_gt.map(|v| v + 0.1)), x, t.constant(img_gt.clone())),
            &recon.map(|v| v * 8.0),
            EPS,
        )?,
        grad_check(|t, x| unet_loss(x, t.constant(img_gt.clone())), &recon, EPS)?,
        grad_check(|t, x| fusion_loss(x, t.constant(img_gt.clone()), &cfg, &ex), &recon, EPS)?,
    ];
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn image_transforms() -> Result<f64> {
    let x = random(&[1, 1, 7, 6], 40, 0.1, 0.3);
    Ok(check(|_, v| window_var(v, WindowSpec::SOFT_TISSUE), &x)?.max(check(|_, v| sobel_edge_var(v), &x)?))
}

fn small_geometry() -> FanBeamGeometry {
    FanBeamGeometry {
        num_views: 16,
        num_detectors: 16,
        image_size: 8,
        detector_spacing: 0.36 * 8.0,
        pixel_spacing: 0.64 * 8.0,
        ..FanBeamGeometry::desk()
    }
}

fn sum_fbp() -> Result<f64> {
    let op = Arc::new(FbpOperator::<f64>::new(&small_geometry())?);
    grad_check(|_, s| fbp_var(s, &op)?.sum(), &random(&[1, 16, 16], 41, 0.0, 2.0), EPS)
}

fn splice_and_fbp() -> Result<f64> {
    let op = Arc::new(FbpOperator::<f64>::new(&small_geometry())?);
    let corrupted = random(&[1, 1, 16, 16], 42, 0.0, 2.0);
    let trace = random(&[1, 1, 16, 16], 43, 0.0, 1.0).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    check(|_, s| replace_and_recon(s, &corrupted, &trace, &op), &random(&[1, 1, 16, 16], 44, 0.0, 2.0))
}

/// Every registered check with its tolerance.
pub fn registry() -> Vec<GradCase> {
    let case = |name, run| GradCase { name, tolerance: TOLERANCE, run };
    vec![
        case("conv2d.input", conv_input),
        case("conv2d.weight", conv_weight),
        case("batch_norm", batch_norm),
        case("pointwise", pointwise),
        case("resampling", resampling),
        case("rfft2_irfft2", spectral),
        case("conv_bn_relu", conv_bn_relu),
        case("fourier_unit", fourier_unit),
        case("ffc_block", ffc_block),
        case("ffc_block.spatial", spatial_block),
        case("fourier_skip", fourier_skip),
        case("sinogram_net", sinogram_net),
        case("image_and_fusion_nets", image_nets),
        case("losses", losses),
        case("window_and_sobel", image_transforms),
        case("sum_fbp", sum_fbp),
        case("replace_and_recon", splice_and_fbp),
    ]
}
