//! Property tests for invariants that hold for arbitrary inputs.

use proptest::prelude::*;

use marnet_core::autodiff::Tape;
use marnet_core::fft::{irfft2, rfft2, rfft2_stacked, rfft2_stacked_adjoint, FftNorm};
use marnet_core::geometry::{hu_from_mu, mu_from_hu, CtImage, FanBeamGeometry, Projector};
use marnet_core::losses::{fusion_loss_value, window_normalized, FeatureExtractor, FusionLossConfig, WindowSpec};
use marnet_core::mar::li_complete;
use marnet_core::metrics::{metric_report, psnr, rmse, ssim};
use marnet_core::physics::{compute_trace, dilate, MetalMask};
use marnet_core::tensor::{conv2d, conv2d_backward_input};
use marnet_core::tensor::Tensor;

fn small_geometry(views: usize) -> FanBeamGeometry {
    FanBeamGeometry {
        source_to_center: 59.5,
        num_views: views,
        num_detectors: 48,
        detector_spacing: 0.48,
        image_size: 24,
        pixel_spacing: 0.8,
        angular_range: 360.0,
    }
}

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn binary(shape: Vec<usize>, density: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0.0..1.0f64, n).prop_map(move |v| Tensor::new(&shape, v.into_iter().map(|u| f64::from(u < density)).collect()).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn subset(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x <= y)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn tensor_length_must_match_extents(shape in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert_eq!(Tensor::new(&shape, vec![0.0f64; n + extra]).is_ok(), extra == 0);
    }

    #[test]
    fn rfft2_round_trips_and_keeps_energy(h in 2usize..24, w in 2usize..24, seed in any::<u64>()) {
        let x = Tensor::<f64>::from_fn(&[2, 1, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 500.0 - 1.0);
        let s = rfft2(&x, FftNorm::Ortho).unwrap();
        prop_assert_eq!(s.real.shape(), &[2, 1, h, w / 2 + 1]);
        prop_assert_eq!(s.real.shape(), s.imag.shape());
        prop_assert!(rel(s.energy(), x.dot(&x).unwrap()) < 1e-10);
        prop_assert!(irfft2(&s, FftNorm::Ortho).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn stacked_fft_gradient_is_its_adjoint(h in 2usize..12, w in 2usize..12, a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let x = Tensor::<f64>::from_fn(&[1, 2, h, w], |i| libm::sin(a * i as f64 + b));
        let fx = rfft2_stacked(&x, FftNorm::Ortho).unwrap();
        let y = Tensor::<f64>::from_fn(fx.shape(), |i| libm::cos(b * i as f64 + a));
        let fty = rfft2_stacked_adjoint(&y, (h, w), FftNorm::Ortho).unwrap();
        prop_assert!(rel(fx.dot(&y).unwrap(), x.dot(&fty).unwrap()) < 1e-10);
    }

    #[test]
    fn conv_input_gradient_is_its_adjoint(
        x in tensor(vec![2, 3, 7, 6], -1.0, 1.0),
        wt in tensor(vec![4, 3, 3, 3], -1.0, 1.0),
        stride in 1usize..3,
        padding in 0usize..2,
        seed in any::<u64>(),
    ) {
        let y0 = conv2d(&x, &wt, None, stride, padding).unwrap();
        let y = Tensor::<f64>::from_fn(y0.shape(), |i| ((i as u64 ^ seed) % 17) as f64 / 8.0 - 1.0);
        let back = conv2d_backward_input(&y, &wt, x.shape(), stride, padding).unwrap();
        prop_assert!(rel(y0.dot(&y).unwrap(), x.dot(&back).unwrap()) < 1e-10);
    }

    #[test]
    fn projector_is_linear_with_exact_adjoint(
        views in 4usize..20,
        x in tensor(vec![2, 24, 24], -1.0, 1.0),
        k in -2.0..2.0f64,
    ) {
        let p = Projector::new(&small_geometry(views));
        let px = p.project(&x).unwrap();
        let y = Tensor::<f64>::from_fn(px.shape(), |i| libm::sin(k * i as f64));
        prop_assert!(rel(px.dot(&y).unwrap(), x.dot(&p.adjoint(&y).unwrap()).unwrap()) < 1e-10);
        let scaled = p.project(&x.scale(k)).unwrap();
        prop_assert!(scaled.max_abs_diff(&px.scale(k)).unwrap() <= 1e-9 * px.norm().max(1.0));
    }

    #[test]
    fn hu_conversion_round_trips(mu in tensor(vec![5, 5], 0.0, 0.6)) {
        let img = CtImage::attenuation(mu.clone(), 0.5);
        let back = mu_from_hu(&hu_from_mu(&img).unwrap()).unwrap();
        prop_assert!(back.values.max_abs_diff(&mu).unwrap() < 1e-12);
    }

    #[test]
    fn dilation_is_extensive_and_nested(m in binary(vec![2, 13, 11], 0.05)) {
        prop_assert_eq!(dilate(&m, 1).unwrap(), m.clone());
        let mut prev = m.clone();
        for k in [3, 5, 7] {
            let d = dilate(&m, k).unwrap();
            prop_assert!(subset(&prev, &d));
            prop_assert!(d.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prev = d;
        }
        let ones = Tensor::<f64>::ones(&[9, 9]);
        prop_assert_eq!(dilate(&ones, 5).unwrap(), ones);
    }

    #[test]
    fn trace_is_monotone_in_the_mask(m in binary(vec![24, 24], 0.01), k in prop::sample::select(vec![3usize, 5])) {
        let g = small_geometry(12);
        let small = MetalMask::new(m.clone()).unwrap();
        let big = MetalMask::new(dilate(&m, k).unwrap()).unwrap();
        let (ts, tb) = (compute_trace(&small, &g).unwrap(), compute_trace(&big, &g).unwrap());
        prop_assert!(ts.is_subset_of(&tb));
    }

    #[test]
    fn linear_interpolation_only_touches_the_trace(
        s in tensor(vec![20, 6], -1.0, 1.0),
        trace in binary(vec![20, 6], 0.3),
    ) {
        let out = li_complete(&s, &trace).unwrap();
        prop_assert!(out.is_finite());
        for ((&o, &v), &m) in out.data().iter().zip(s.data()).zip(trace.data()) {
            if m == 0.0 {
                prop_assert_eq!(o.to_bits(), v.to_bits());
            }
        }
        prop_assert_eq!(li_complete(&out, &trace).unwrap(), out);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(a in tensor(vec![16, 16], 0.0, 1.0), b in tensor(vec![16, 16], 0.0, 1.0)) {
        prop_assert_eq!(rmse(&a, &b, None).unwrap(), rmse(&b, &a, None).unwrap());
        let (sab, sba) = (ssim(&a, &b, None).unwrap(), ssim(&b, &a, None).unwrap());
        prop_assert!((sab - sba).abs() < 1e-12);
        prop_assert!(sab <= 1.0 + 1e-12);
        prop_assert!(rmse(&a, &b, None).unwrap() >= 0.0);
        prop_assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        prop_assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
    }

    #[test]
    fn report_mean_is_the_window_average(a in tensor(vec![16, 16], -0.2, 0.8), b in tensor(vec![16, 16], -0.2, 0.8)) {
        let r = metric_report(&a, &b, &WindowSpec::ALL, None).unwrap();
        let n = r.windows.len() as f64;
        let mean_rmse: f64 = r.windows.iter().map(|(_, s)| s.rmse).sum::<f64>() / n;
        let mean_ssim: f64 = r.windows.iter().map(|(_, s)| s.ssim).sum::<f64>() / n;
        prop_assert!((r.mean.rmse - mean_rmse).abs() < 1e-9);
        prop_assert!((r.mean.ssim - mean_ssim).abs() < 1e-9);
    }

    #[test]
    fn windowing_is_clamped_and_monotone(v in tensor(vec![64], -1.0, 2.0)) {
        for w in WindowSpec::ALL {
            let out = window_normalized(&v, w);
            prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            for (i, j) in (0..64).flat_map(|i| (0..64).map(move |j| (i, j))) {
                if v.data()[i] <= v.data()[j] {
                    prop_assert!(out.data()[i] <= out.data()[j]);
                }
            }
        }
    }

    #[test]
    fn elementwise_losses_are_nonnegative_and_zero_at_equality(a in tensor(vec![1, 1, 6, 6], -2.0, 2.0), b in tensor(vec![1, 1, 6, 6], -2.0, 2.0)) {
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b));
        prop_assert!(va.l1(vb).unwrap().value().item() >= 0.0);
        prop_assert!(va.smooth_l1(vb, 1.0).unwrap().value().item() >= 0.0);
        prop_assert!(va.mse(vb).unwrap().value().item() >= 0.0);
        let va2 = tape.constant(a);
        prop_assert_eq!(va.l1(va2).unwrap().value().item(), 0.0);
        prop_assert_eq!(va.smooth_l1(va2, 1.0).unwrap().value().item(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn composite_image_loss_is_nonnegative_and_zero_at_equality(a in tensor(vec![1, 1, 16, 16], 0.0, 1.0), b in tensor(vec![1, 1, 16, 16], 0.0, 1.0)) {
        let ex = FeatureExtractor::<f64>::new(0);
        let cfg = FusionLossConfig::default();
        prop_assert!(fusion_loss_value(&a, &b, &cfg, &ex).unwrap() >= 0.0);
        prop_assert_eq!(fusion_loss_value(&a, &a, &cfg, &ex).unwrap(), 0.0);
    }
}
