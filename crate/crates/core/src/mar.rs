//! Classical metal artifact reduction baselines: linear interpolation (LI),
//! prior-normalized interpolation (NMAR) and its frequency-split refinement
//! (FSNMAR).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{project_planes, FanBeamGeometry, FbpOperator, MU_WATER};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Fills every run of trace bins along the detector axis (axis 0) by
/// linear interpolation between the nearest untouched neighbours.
///
/// Runs touching the detector edge take the single available anchor. A view
/// that is covered completely is filled with the mean of the untouched
/// bins of its two neighbouring views.
pub fn li_complete<T: Real>(sino: &Tensor<T>, trace: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("li_complete", sino, trace)?;
    let (nd, nv) = (sino.shape()[0], sino.shape()[1]);
    let s = sino.data();
    let m = trace.data();
    let mut out = s.to_vec();
    let mut covered = Vec::new();
    for v in 0..nv {
        let at = |d: usize| d * nv + v;
        if (0..nd).all(|d| m[at(d)] != T::zero()) {
            covered.push(v);
            continue;
        }
        let mut d = 0;
        while d < nd {
            if m[at(d)] == T::zero() {
                d += 1;
                continue;
            }
            let start = d;
            while d < nd && m[at(d)] != T::zero() {
                d += 1;
            }
            let left = start.checked_sub(1).map(|i| s[at(i)]);
            let right = (d < nd).then(|| s[at(d)]);
            for k in start..d {
                out[at(k)] = match (left, right) {
                    (Some(a), Some(b)) => {
                        let t = T::of((k + 1 - start) as f64 / (d + 1 - start) as f64);
                        a + t * (b - a)
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => unreachable!("view has untouched bins"),
                };
            }
        }
    }
    if !covered.is_empty() {
        if covered.len() == nv {
            return Err(Error::invalid("li_complete", "every view is fully inside the trace"));
        }
        log::warn!("li_complete: {} view(s) fully inside the trace, filled from neighbours", covered.len());
        for &v in &covered {
            let mut sum = T::zero();
            let mut count = 0usize;
            for step in [nv - 1, 1] {
                let mut u = (v + step) % nv;
                while covered.contains(&u) {
                    u = (u + step) % nv;
                }
                for d in 0..nd {
                    if m[d * nv + u] == T::zero() {
                        sum += s[d * nv + u];
                        count += 1;
                    }
                }
            }
            let fill = sum / T::of(count as f64);
            for d in 0..nd {
                out[d * nv + v] = fill;
            }
        }
    }
    Ok(Tensor::from_parts(sino.shape(), out))
}

/// Thresholds for the tissue-class prior, in HU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmarConfig {
    pub air_below_hu: f64,
    pub bone_above_hu: f64,
    /// Floor of the prior projection relative to its median positive value.
    pub floor_fraction: f64,
}

impl Default for NmarConfig {
    fn default() -> Self {
        Self {
            air_below_hu: -500.0,
            bone_above_hu: 400.0,
            floor_fraction: 1e-3,
        }
    }
}

/// Three-class prior: air to 0, soft tissue to water, bone kept, followed
/// by a 3×3 mean filter.
pub fn segment_prior<T: Real>(image: &Tensor<T>, cfg: &NmarConfig) -> Tensor<T> {
    let to_mu = |hu: f64| MU_WATER * (1.0 + hu / 1000.0);
    let (air, bone) = (T::of(to_mu(cfg.air_below_hu)), T::of(to_mu(cfg.bone_above_hu)));
    let water = T::of(MU_WATER);
    let classes = image.map(|v| {
        if v < air {
            T::zero()
        } else if v <= bone {
            water
        } else {
            v
        }
    });
    box_mean3(&classes)
}

fn box_mean3<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    Tensor::from_fn(x.shape(), |i| {
        let (r, c) = (i / w, i % w);
        let mut sum = T::zero();
        let mut n = 0;
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                sum += d[rr * w + cc];
                n += 1;
            }
        }
        sum / T::of(n as f64)
    })
}

/// NMAR given an explicit prior projection. Bins outside the trace are
/// returned unchanged.
pub fn nmar_with_prior<T: Real>(sino: &Tensor<T>, trace: &Tensor<T>, prior_projection: &Tensor<T>, floor_fraction: f64) -> Result<Tensor<T>> {
    check_same("nmar", sino, trace)?;
    check_same("nmar", sino, prior_projection)?;
    let mut positives: Vec<f64> = prior_projection.data().iter().map(|v| v.f64()).filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        log::warn!("nmar: prior projects to zero everywhere, falling back to linear interpolation");
        return li_complete(sino, trace);
    }
    positives.sort_by(f64::total_cmp);
    let floor = T::of(floor_fraction * positives[positives.len() / 2]);
    let prior = prior_projection.map(|v| v.max(floor));
    let normalized = sino.zip_map(&prior, |s, p| s / p)?;
    let filled = li_complete(&normalized, trace)?;
    let mut out = sino.clone();
    for (((o, &f), &p), &m) in out.data_mut().iter_mut().zip(filled.data()).zip(prior.data()).zip(trace.data()) {
        if m != T::zero() {
            *o = f * p;
        }
    }
    Ok(out)
}

/// Full NMAR: LI reconstruction, tissue-class prior, forward projection of
/// the prior, interpolation of the normalized sinogram.
pub fn nmar<T: Real>(sino: &Tensor<T>, trace: &Tensor<T>, geom: &FanBeamGeometry, fbp: &FbpOperator<T>, cfg: &NmarConfig) -> Result<Tensor<T>> {
    check_same("nmar", sino, trace)?;
    if trace.data().iter().all(|&m| m == T::zero()) {
        return Ok(sino.clone());
    }
    let x_li = fbp.apply(&li_complete(sino, trace)?)?;
    let prior = segment_prior(&x_li, cfg);
    let prior_projection = project_planes(geom, &prior)?;
    nmar_with_prior(sino, trace, &prior_projection, cfg.floor_fraction)
}

/// Gaussian kernel size and standard deviation in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
}

impl GaussianKernel {
    /// Scales a 512-pixel kernel to `image_size`, rounding to an odd size
    /// of at least 3. When the minimum applies, `sigma` keeps its ratio to
    /// the size.
    pub fn scaled(full: GaussianKernel, image_size: usize) -> Self {
        let f = image_size as f64 / 512.0;
        let raw = full.size as f64 * f;
        let mut size = libm::round(raw) as usize;
        if size % 2 == 0 {
            size += 1;
        }
        if size < 3 {
            return Self {
                size: 3,
                sigma: full.sigma * 3.0 / full.size as f64,
            };
        }
        Self {
            size,
            sigma: full.sigma * f,
        }
    }

    fn taps(&self) -> Vec<f64> {
        let r = (self.size / 2) as isize;
        let w: Vec<f64> = (-r..=r)
            .map(|i| libm::exp(-((i * i) as f64) / (2.0 * self.sigma * self.sigma)))
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Separable Gaussian filter; taps that fall outside the image are dropped
/// and the rest renormalized.
pub fn gaussian_filter<T: Real>(x: &Tensor<T>, k: GaussianKernel) -> Tensor<T> {
    let taps = k.taps();
    let r = (k.size / 2) as isize;
    let (h, w) = (x.shape()[0] as isize, x.shape()[1] as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &wt) in taps.iter().enumerate() {
                    let o = t as isize - r;
                    let (ii, jj) = if horizontal { (i, j + o) } else { (i + o, j) };
                    if ii >= 0 && ii < h && jj >= 0 && jj < w {
                        acc += wt * src[(ii * w + jj) as usize];
                        norm += wt;
                    }
                }
                out[(i * w + j) as usize] = acc / norm;
            }
        }
        out
    };
    let src: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    let out = pass(&pass(&src, true), false);
    Tensor::from_parts(x.shape(), out.into_iter().map(T::of).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsnmarConfig {
    pub split: GaussianKernel,
    pub weight: GaussianKernel,
}

impl FsnmarConfig {
    /// Kernel sizes and widths at 512 pixels.
    pub const FULL: FsnmarConfig = FsnmarConfig {
        split: GaussianKernel { size: 3, sigma: 1.0 },
        weight: GaussianKernel { size: 99, sigma: 45.0 },
    };

    pub fn for_size(image_size: usize) -> Self {
        Self {
            split: GaussianKernel::scaled(Self::FULL.split, image_size),
            weight: GaussianKernel::scaled(Self::FULL.weight, image_size),
        }
    }
}

/// Metal-proximity weight in `[0, 1]`: the blurred mask scaled to peak 1.
pub fn proximity_weight<T: Real>(mask: &Tensor<T>, k: GaussianKernel) -> Tensor<T> {
    let blurred = gaussian_filter(mask, k);
    let peak = blurred.data().iter().fold(T::zero(), |m, &v| m.max(v));
    if peak == T::zero() {
        return blurred;
    }
    blurred.map(|v| v / peak)
}

/// Frequency-split combination with an explicit weight map:
/// `low(x_nmar) + w·high(x_uncorrected) + (1 - w)·high(x_nmar)`.
pub fn fsnmar_with_weight<T: Real>(x_nmar: &Tensor<T>, x_uncorrected: &Tensor<T>, weight: &Tensor<T>, split: GaussianKernel) -> Result<Tensor<T>> {
    check_same("fsnmar", x_nmar, x_uncorrected)?;
    check_same("fsnmar", x_nmar, weight)?;
    let low_nmar = gaussian_filter(x_nmar, split);
    let low_mc = gaussian_filter(x_uncorrected, split);
    let n = x_nmar.len();
    let out = (0..n)
        .map(|i| {
            let w = weight.data()[i];
            let high_mc = x_uncorrected.data()[i] - low_mc.data()[i];
            let high_nmar = x_nmar.data()[i] - low_nmar.data()[i];
            low_nmar.data()[i] + w * high_mc + (T::one() - w) * high_nmar
        })
        .collect();
    Ok(Tensor::from_parts(x_nmar.shape(), out))
}

pub fn fsnmar<T: Real>(x_nmar: &Tensor<T>, x_uncorrected: &Tensor<T>, mask: &Tensor<T>, cfg: &FsnmarConfig) -> Result<Tensor<T>> {
    check_same("fsnmar", x_nmar, mask)?;
    fsnmar_with_weight(x_nmar, x_uncorrected, &proximity_weight(mask, cfg.weight), cfg.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{self, metal_library, NoiseMode, SimulationConfig};
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn random_trace(shape: &[usize], seed: u64, p: f64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape, |_| if r.random_bool(p) { 1.0 } else { 0.0 })
    }

    #[test]
    fn li_recovers_detector_linear_data() {
        let (nd, nv) = (40, 7);
        let s = Tensor::<f64>::from_fn(&[nd, nv], |i| {
            let (d, v) = (i / nv, i % nv);
            0.3 * d as f64 - 2.0 + v as f64 * 1.1
        });
        let mut t = Tensor::<f64>::zeros(&[nd, nv]);
        for v in 0..nv {
            for d in 5 + v..12 + 2 * v {
                t.data_mut()[d * nv + v] = 1.0;
            }
        }
        let corrupted = s.zip_map(&t, |a, m| if m == 1.0 { 99.0 } else { a }).unwrap();
        let out = li_complete(&corrupted, &t).unwrap();
        assert!(out.max_abs_diff(&s).unwrap() < 1e-6);
    }

    #[test]
    fn li_edge_cases() {
        let s = Tensor::new(&[3, 1], vec![1.0, 50.0, 3.0]).unwrap();
        let t = Tensor::new(&[3, 1], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(li_complete(&s, &t).unwrap().data(), &[1.0, 2.0, 3.0]);
        let zero = Tensor::zeros(&[3, 1]);
        assert_eq!(li_complete(&s, &zero).unwrap(), s);
        let edge = Tensor::new(&[3, 1], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(li_complete(&s, &edge).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn fully_covered_view_uses_neighbours() {
        let s = Tensor::<f64>::from_fn(&[4, 3], |i| (i % 3) as f64 * 10.0 + (i / 3) as f64);
        let mut t = Tensor::<f64>::zeros(&[4, 3]);
        for d in 0..4 {
            t.data_mut()[d * 3 + 1] = 1.0;
        }
        let out = li_complete(&s, &t).unwrap();
        // mean of views 0 and 2: (0+1+2+3 + 20+21+22+23) / 8 = 92 / 8
        for d in 0..4 {
            assert_eq!(out.data()[d * 3 + 1], 11.5);
        }
        assert!(li_complete(&s, &Tensor::ones(&[4, 3])).is_err());
    }

    #[test]
    fn li_is_idempotent_and_leaves_untouched_bins() {
        for seed in 0..5 {
            let s = random(&[30, 9], seed);
            let t = random_trace(&[30, 9], seed + 100, 0.3);
            let once = li_complete(&s, &t).unwrap();
            assert_eq!(li_complete(&once, &t).unwrap(), once);
            for ((&a, &b), &m) in once.data().iter().zip(s.data()).zip(t.data()) {
                if m == 0.0 {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn constant_prior_reduces_to_li() {
        let s = random(&[30, 9], 1).map(|v| v + 3.0);
        let t = random_trace(&[30, 9], 2, 0.25);
        let prior = Tensor::full(&[30, 9], 2.5);
        let a = nmar_with_prior(&s, &t, &prior, 1e-3).unwrap();
        let b = li_complete(&s, &t).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn nmar_leaves_untouched_bins_and_metal_free_input() {
        let g = FanBeamGeometry::desk().with_views(90);
        let op = FbpOperator::<f64>::new(&g).unwrap();
        let sim = SimulationConfig::default();
        let data = physics::make_dataset::<f64>(4, &g, &sim, &metal_library(), 3).unwrap();
        for s in &data {
            let out = nmar(&s.corrupted, &s.trace, &g, &op, &NmarConfig::default()).unwrap();
            assert!(out.is_finite());
            for ((&a, &b), &m) in out.data().iter().zip(s.corrupted.data()).zip(s.trace.data()) {
                if m == 0.0 {
                    assert_eq!(a, b);
                }
            }
            let zero = Tensor::zeros(s.trace.shape());
            assert_eq!(nmar(&s.corrupted, &zero, &g, &op, &NmarConfig::default()).unwrap(), s.corrupted);
        }
    }

    #[test]
    fn nmar_beats_li_on_a_water_disk() {
        let g = FanBeamGeometry::desk().with_views(90);
        let n = g.image_size;
        let op = FbpOperator::<f64>::new(&g).unwrap();
        let water = Tensor::from_fn(&[n, n], |i| {
            let (x, y) = physics::pixel_coords(n, i / n, i % n);
            if x * x + y * y <= 0.7 * 0.7 {
                MU_WATER
            } else {
                0.0
            }
        });
        let mask = physics::MetalMask::new(physics::metal_library()[9].rasterize(n, 9.0, 4.0, 0.3)).unwrap();
        let img = crate::geometry::CtImage::attenuation(water.clone(), g.pixel_spacing);
        let mimg = physics::implant_metal(&img, &mask).unwrap();
        let sim = SimulationConfig::default();
        let corrupted = physics::polychromatic_project(&mimg, &g, &sim.spectrum, &sim.materials, NoiseMode::Off, 0).unwrap().values;
        let trace = physics::compute_trace(&mask, &g).unwrap().values().clone();
        let clean = project_planes(&g, &water).unwrap();
        let trace_rmse = |x: &Tensor<f64>| {
            let (mut se, mut n) = (0.0, 0.0);
            for ((&a, &b), &m) in x.data().iter().zip(clean.data()).zip(trace.data()) {
                if m == 1.0 {
                    se += (a - b) * (a - b);
                    n += 1.0;
                }
            }
            libm::sqrt(se / n)
        };
        let li = trace_rmse(&li_complete(&corrupted, &trace).unwrap());
        let nm = trace_rmse(&nmar(&corrupted, &trace, &g, &op, &NmarConfig::default()).unwrap());
        assert!(nm <= li, "nmar {nm} li {li}");
    }

    #[test]
    fn kernel_scaling() {
        let k = FsnmarConfig::for_size(64);
        assert_eq!(k.split, GaussianKernel { size: 3, sigma: 1.0 });
        assert_eq!(k.weight.size, 13);
        assert!((k.weight.sigma - 45.0 / 8.0).abs() < 1e-12);
        assert_eq!(FsnmarConfig::for_size(512), FsnmarConfig::FULL);
    }

    #[test]
    fn fsnmar_blend_algebra() {
        let a = random(&[16, 16], 1);
        let b = random(&[16, 16], 2);
        let split = GaussianKernel { size: 3, sigma: 1.0 };
        let zero = Tensor::zeros(&[16, 16]);
        let out = fsnmar_with_weight(&a, &b, &zero, split).unwrap();
        assert!(out.max_abs_diff(&a).unwrap() < 1e-12);
        let one = Tensor::ones(&[16, 16]);
        let out = fsnmar_with_weight(&a, &b, &one, split).unwrap();
        let expect = gaussian_filter(&a, split).add(&b.sub(&gaussian_filter(&b, split)).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
        let no_metal = fsnmar(&a, &b, &zero, &FsnmarConfig::for_size(16)).unwrap();
        assert!(no_metal.max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn fsnmar_restores_high_frequencies_near_metal() {
        let g = FanBeamGeometry::desk().with_views(90);
        let op = FbpOperator::<f64>::new(&g).unwrap();
        let sim = SimulationConfig {
            noise: NoiseMode::Off,
            ..SimulationConfig::default()
        };
        let s = physics::make_dataset::<f64>(1, &g, &sim, &metal_library(), 21).unwrap().remove(0);
        let x_uncorrected = op.apply(&s.corrupted).unwrap();
        let x_nmar = op.apply(&nmar(&s.corrupted, &s.trace, &g, &op, &NmarConfig::default()).unwrap()).unwrap();
        let cfg = FsnmarConfig::for_size(g.image_size);
        let x_fs = fsnmar(&x_nmar, &x_uncorrected, &s.mask, &cfg).unwrap();
        let ring = dilate_ring(&s.mask);
        let energy = |x: &Tensor<f64>| {
            let hp = x.sub(&gaussian_filter(x, cfg.split)).unwrap();
            hp.data().iter().zip(ring.data()).map(|(&v, &r)| r * v * v).sum::<f64>()
        };
        assert!(energy(&x_fs) >= energy(&x_nmar));
    }

    fn dilate_ring(mask: &Tensor<f64>) -> Tensor<f64> {
        let big = physics::dilate(mask, 7).unwrap();
        big.sub(mask).unwrap()
    }
}
