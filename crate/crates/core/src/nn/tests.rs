use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::autodiff::Tape;
use crate::fft::FftNorm;
use crate::geometry::{FanBeamGeometry, FbpOperator};
use crate::rng;
use crate::tensor::Tensor;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn tiny_geometry() -> FanBeamGeometry {
    FanBeamGeometry {
        num_views: 24,
        num_detectors: 20,
        image_size: 16,
        detector_spacing: 0.36 * 6.4,
        pixel_spacing: 0.64 * 4.0,
        ..FanBeamGeometry::desk()
    }
}

fn tiny_input(p: &Pipeline<f64>, batch: usize, seed: u64) -> PipelineInput<f64> {
    let corrupted = random(&[batch, 1, 20, 24], seed, 0.0, 3.0);
    let trace = random(&[batch, 1, 20, 24], seed + 1, 0.0, 1.0).map(|v| if v > 0.8 { 1.0 } else { 0.0 });
    let projection = trace.map(|v| v * 0.7);
    p.prepare_tensors(corrupted, trace, &projection).unwrap()
}

#[test]
fn registered_gradient_checks_pass() {
    for case in gradcases::registry() {
        let err = (case.run)().unwrap();
        assert!(err < case.tolerance, "{}: {err}", case.name);
    }
}

#[test]
fn zero_heads_give_zero_sinogram_and_identity_fusion() {
    let mut store = ParamStore::new();
    for mode in SinogramMode::ALL {
        let mut s = ParamStore::new();
        let p = Pipeline::new(PipelineConfig::new(4, mode), &tiny_geometry(), &mut s).unwrap();
        let out = p.infer(&s, &tiny_input(&p, 2, 3)).unwrap();
        assert_eq!(out.restored.shape(), &[2, 1, 20, 24]);
        assert!(out.restored.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.fused, out.image);
        store = s;
    }
    assert!(!store.is_empty());
}

#[test]
fn completion_ignores_values_inside_the_trace() {
    let mut store = ParamStore::new();
    let p = Pipeline::new(PipelineConfig::new(4, SinogramMode::Completion), &tiny_geometry(), &mut store).unwrap();
    // make the head nonzero so the output depends on the input
    store.set("sinogram.out.w", random(&[1, 8, 3, 3], 9, -0.5, 0.5)).unwrap();
    let a = tiny_input(&p, 1, 5);
    let altered = a.corrupted.zip_map(&a.trace, |s, m| if m > 0.0 { s + 7.5 } else { s }).unwrap();
    let b = p.prepare_tensors(altered, a.trace.clone(), &a.trace).unwrap();
    assert_ne!(a.corrupted, b.corrupted);
    let ya = p.infer(&store, &a).unwrap().restored;
    let yb = p.infer(&store, &b).unwrap().restored;
    assert_eq!(ya, yb);
    assert!(ya.data().iter().any(|&v| v != 0.0));
}

#[test]
fn splice_degenerate_cases() {
    let geom = tiny_geometry();
    let op = alloc::sync::Arc::new(FbpOperator::<f64>::new(&geom).unwrap());
    let corrupted = random(&[1, 1, 20, 24], 1, 0.0, 2.0);
    let restored = random(&[1, 1, 20, 24], 2, 0.0, 2.0);
    let tape = Tape::new();
    let none = Tensor::zeros(&[1, 1, 20, 24]);
    let x = replace_and_recon(tape.constant(restored.clone()), &corrupted, &none, &op).unwrap();
    assert_eq!(x.value(), op.apply(&corrupted).unwrap());
    let all = Tensor::ones(&[1, 1, 20, 24]);
    let y = replace_and_recon(tape.constant(restored.clone()), &corrupted, &all, &op).unwrap();
    assert!(y.value().max_abs_diff(&op.apply(&restored).unwrap()).unwrap() < 1e-12);
}

#[test]
fn sinogram_gradient_vanishes_off_the_trace() {
    let geom = tiny_geometry();
    let op = alloc::sync::Arc::new(FbpOperator::<f64>::new(&geom).unwrap());
    let corrupted = random(&[1, 1, 20, 24], 1, 0.0, 2.0);
    let trace = random(&[1, 1, 20, 24], 3, 0.0, 1.0).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let target = random(&[1, 1, 16, 16], 4, 0.0, 0.3);
    let tape = Tape::new();
    let s = tape.leaf(random(&[1, 1, 20, 24], 2, 0.0, 2.0));
    let x = replace_and_recon(s, &corrupted, &trace, &op).unwrap();
    let loss = x.l1(tape.constant(target)).unwrap();
    let g = tape.backward(loss).unwrap().get_or_zeros(s);
    let mut inside = 0;
    for (gv, m) in g.data().iter().zip(trace.data()) {
        if *m == 0.0 {
            assert_eq!(*gv, 0.0);
        } else if *gv != 0.0 {
            inside += 1;
        }
    }
    assert!(inside > 0);
}

#[test]
fn spatial_ablation_matches_parameter_budget() {
    for width in [8, 16, 32] {
        let count = |kind| {
            let mut s = ParamStore::<f32>::new();
            let cfg = SinogramNetConfig { global: kind, ..SinogramNetConfig::new(width, SinogramMode::Completion) };
            SinogramNet::new(&mut Init::new(&mut s, 0), "s", cfg).unwrap();
            s.count_weights("s.") as f64
        };
        let (f, r) = (count(GlobalKind::Fourier), count(GlobalKind::Spatial));
        assert!((f - r).abs() / f < 0.05, "width {width}: {f} vs {r}");
    }
}

#[test]
fn eval_mode_is_batch_invariant() {
    let mut store = ParamStore::new();
    let p = Pipeline::new(PipelineConfig::new(4, SinogramMode::EnhanceProjection), &tiny_geometry(), &mut store).unwrap();
    for name in ["sinogram.out.w", "image.head.w", "fusion.head.w"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, random(&shape, 7, -0.2, 0.2)).unwrap();
    }
    // non-trivial running statistics
    let names: Vec<_> = store.iter().filter(|(n, _, _)| n.ends_with("running_mean")).map(|(n, _, t)| (alloc::string::String::from(n), t.len())).collect();
    for (i, (n, c)) in names.iter().enumerate() {
        store.set(n, random(&[*c], 100 + i as u64, -0.1, 0.1)).unwrap();
    }
    let batch = tiny_input(&p, 3, 11);
    let together = p.infer(&store, &batch).unwrap();
    for b in 0..3 {
        let one = p
            .prepare_tensors(
                batch.corrupted.slice_batch(b, b + 1).unwrap(),
                batch.trace.slice_batch(b, b + 1).unwrap(),
                &batch.trace.slice_batch(b, b + 1).unwrap().map(|v| v * 0.7),
            )
            .unwrap();
        let single = p.infer(&store, &one).unwrap();
        for (x, y) in [(&together.restored, &single.restored), (&together.fused, &single.fused)] {
            assert!(x.slice_batch(b, b + 1).unwrap().max_abs_diff(y).unwrap() < 1e-5);
        }
    }
}

#[test]
fn identity_spectral_filter_is_an_fft_round_trip() {
    for (h, w) in [(8, 8), (7, 9), (2, 3)] {
        let mut store = ParamStore::<f64>::new();
        let fu = FourierUnit::identity(&mut Init::new(&mut store, 0), "fu", 3).unwrap();
        let x = random(&[2, 3, h, w], 1, -1.0, 1.0);
        let tape = Tape::new();
        let y = fu.forward(&Ctx::new(&tape, &store, true), tape.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x).unwrap() < 1e-12);
    }
}

#[test]
fn global_branch_reaches_every_pixel_local_conv_does_not() {
    let (h, w) = (12, 10);
    let x = random(&[1, 4, h, w], 2, -1.0, 1.0);
    let mut bumped = x.clone();
    let (pr, pc) = (3, 4);
    bumped.data_mut()[pr * w + pc] += 1.0;
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 1);
    let fu = FourierUnit::new(&mut init, "fu", 4).unwrap();
    let conv = Conv2d::new(&mut init, "c", 4, 4, 3, 1).unwrap();
    let run = |input: &Tensor<f64>, global: bool| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let v = tape.constant(input.clone());
        if global { fu.forward(&ctx, v) } else { conv.forward(&ctx, v) }.unwrap().value()
    };
    let g = run(&bumped, true).sub(&run(&x, true)).unwrap();
    let l = run(&bumped, false).sub(&run(&x, false)).unwrap();
    for c in 0..4 {
        for i in 0..h {
            for j in 0..w {
                let k = (c * h + i) * w + j;
                assert!(g.data()[k].abs() > 0.0, "global branch missed ({c},{i},{j})");
                let near = i.abs_diff(pr) <= 1 && j.abs_diff(pc) <= 1;
                if !near {
                    assert_eq!(l.data()[k], 0.0);
                }
            }
        }
    }
}

#[test]
fn ffc_preserves_shape_and_splits_channels() {
    assert_eq!(ffc_split(16), (4, 12));
    assert_eq!(ffc_split(6), (2, 4));
    let mut store = ParamStore::<f64>::new();
    let block = FfcBlock::new(&mut Init::new(&mut store, 0), "b", 8, GlobalKind::Fourier).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true);
    let y = block.forward(&ctx, tape.constant(random(&[2, 8, 5, 7], 0, -1.0, 1.0))).unwrap();
    assert_eq!(y.shape(), vec![2, 8, 5, 7]);
    assert!(block.forward(&ctx, tape.constant(random(&[1, 8, 1, 7], 0, -1.0, 1.0))).is_err());
    assert!(FfcBlock::new(&mut Init::new(&mut store, 0), "c", 1, GlobalKind::Fourier).is_err());
}

#[test]
fn bn_updates_move_running_statistics() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut Init::new(&mut store, 0), "bn", 2).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true);
    bn.forward(&ctx, tape.constant(random(&[2, 2, 3, 3], 0, 1.0, 3.0))).unwrap();
    let ups = ctx.take_bn_updates();
    assert_eq!(ups.len(), 1);
    store.apply_bn_updates(&ups, 0.1).unwrap();
    let m = store.get("bn.running_mean").unwrap();
    for (v, batch) in m.data().iter().zip(&ups[0].mean) {
        assert!((v - 0.1 * batch).abs() < 1e-12);
    }
}

#[test]
fn frozen_prefixes_enter_as_constants() {
    let mut store = ParamStore::<f64>::new();
    let p = Pipeline::new(PipelineConfig::new(2, SinogramMode::Completion), &tiny_geometry(), &mut store).unwrap();
    let input = tiny_input(&p, 1, 0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true).trainable(&["image."]);
    let out = p.forward(&ctx, &input).unwrap();
    let grads = tape.backward(out.image.sum().unwrap()).unwrap();
    let named = ctx.gradients(&grads);
    assert!(!named.is_empty());
    assert!(named.iter().all(|(n, _)| n.starts_with("image.")));
}

#[test]
fn stored_structure_is_validated() {
    let geom = tiny_geometry();
    let mut store = ParamStore::<f64>::new();
    Pipeline::new(PipelineConfig::new(2, SinogramMode::Completion), &geom, &mut store).unwrap();
    assert!(Pipeline::for_store(PipelineConfig::new(2, SinogramMode::EnhanceTrace), &geom, &store).is_ok());
    assert!(Pipeline::for_store(PipelineConfig::new(3, SinogramMode::Completion), &geom, &store).is_err());
    let spatial = PipelineConfig::new(2, SinogramMode::Completion).with_global(GlobalKind::Spatial);
    assert!(Pipeline::for_store(spatial, &geom, &store).is_err());
}

#[test]
fn spectral_norm_choice_is_ortho() {
    // the unit's FFT pair must be unitary for the identity round trip
    let x = random(&[1, 1, 4, 6], 3, -1.0, 1.0);
    let tape = Tape::new();
    let s = tape.constant(x.clone()).rfft2_stacked(FftNorm::Ortho).unwrap();
    let back = s.irfft2_stacked((4, 6), FftNorm::Ortho).unwrap();
    assert!(back.value().max_abs_diff(&x).unwrap() < 1e-12);
}
