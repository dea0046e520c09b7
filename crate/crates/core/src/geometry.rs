//! Fan-beam projection `P`, its exact transpose, and filtered backprojection.
//!
//! Geometry conventions: the source sits at `D (cos b, sin b)` for view
//! angle `b`; detector coordinates `u` are measured on a virtual flat
//! detector through the rotation centre along `(-sin b, cos b)`. Pixel
//! `(row, col)` of an `N × N` image has its centre at
//! `x = (col - (N-1)/2) s`, `y = ((N-1)/2 - row) s`. Sinograms are stored
//! detector-major: shape `(num_detectors, num_views)`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fft::Fft;
use crate::real::Real;
use crate::tensor::Tensor;

/// Linear attenuation of water in 1/cm, the HU anchor.
pub const MU_WATER: f64 = 0.192;

#[derive(Clone, Debug, PartialEq)]
pub struct FanBeamGeometry {
    /// Source to rotation-centre distance in cm.
    pub source_to_center: f64,
    pub num_views: usize,
    pub num_detectors: usize,
    /// Detector pitch in cm on the virtual detector through the centre.
    pub detector_spacing: f64,
    pub image_size: usize,
    /// Pixel pitch in cm.
    pub pixel_spacing: f64,
    /// Scan arc in degrees.
    pub angular_range: f64,
}

impl FanBeamGeometry {
    /// 640 views × 640 detectors over a 512² image.
    pub fn fullscale() -> Self {
        Self {
            source_to_center: 59.5,
            num_views: 640,
            num_detectors: 640,
            detector_spacing: 0.072,
            image_size: 512,
            pixel_spacing: 0.08,
            angular_range: 360.0,
        }
    }

    /// 320 views × 320 detectors over a 208² image.
    pub fn ablation() -> Self {
        Self {
            num_views: 320,
            num_detectors: 320,
            detector_spacing: 0.144,
            image_size: 208,
            pixel_spacing: 40.96 / 208.0,
            ..Self::fullscale()
        }
    }

    /// 128 views × 128 detectors over a 64² image, same field of view.
    pub fn desk() -> Self {
        Self {
            num_views: 128,
            num_detectors: 128,
            detector_spacing: 0.36,
            image_size: 64,
            pixel_spacing: 0.64,
            ..Self::fullscale()
        }
    }

    pub fn with_views(mut self, num_views: usize) -> Self {
        self.num_views = num_views;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.source_to_center,
            self.detector_spacing,
            self.pixel_spacing,
            self.angular_range,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Geometry("distances and angular range must be positive".into()));
        }
        if self.num_views == 0 || self.num_detectors == 0 || self.image_size == 0 {
            return Err(Error::Geometry("views, detectors and image size must be >= 1".into()));
        }
        let d = self.source_to_center;
        let corner = self.fov_radius() * core::f64::consts::SQRT_2;
        if d <= corner {
            return Err(Error::Geometry(format!(
                "source distance {d} cm lies inside the image square (corner at {corner:.2} cm)"
            )));
        }
        let r = self.fov_radius();
        let needed = r * d / libm::sqrt(d * d - r * r);
        let half_width = 0.5 * self.num_detectors as f64 * self.detector_spacing;
        if half_width < needed {
            return Err(Error::Geometry(format!(
                "detector half-width {half_width:.3} cm does not cover the image circle (needs {needed:.3} cm)"
            )));
        }
        Ok(())
    }

    /// Radius of the circle inscribed in the image square, in cm.
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.image_size as f64 * self.pixel_spacing
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        [self.num_detectors, self.num_views]
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.image_size, self.image_size]
    }

    pub fn angle_step(&self) -> f64 {
        self.angular_range.to_radians() / self.num_views as f64
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        view as f64 * self.angle_step()
    }

    pub fn detector_coord(&self, det: usize) -> f64 {
        (det as f64 - 0.5 * (self.num_detectors as f64 - 1.0)) * self.detector_spacing
    }

    fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let c = 0.5 * (self.image_size as f64 - 1.0);
        (
            (col as f64 - c) * self.pixel_spacing,
            (c - row as f64) * self.pixel_spacing,
        )
    }

    /// Visits the Joseph interpolation weights of one ray.
    pub fn for_each_ray_weight(&self, view: usize, det: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.image_size;
        let ps = self.pixel_spacing;
        let c = 0.5 * (n as f64 - 1.0);
        let beta = self.view_angle(view);
        let (cb, sb) = (libm::cos(beta), libm::sin(beta));
        let (sx, sy) = (self.source_to_center * cb, self.source_to_center * sb);
        let u = self.detector_coord(det);
        let (dx, dy) = (-u * sb - sx, u * cb - sy);
        let len = libm::sqrt(dx * dx + dy * dy);
        if dx.abs() >= dy.abs() {
            let step = ps * len / dx.abs();
            // row coordinate along the ray is affine in the column index
            let slope = dy / dx;
            let base = c - (sy + (-c * ps - sx) * slope) / ps;
            for col in 0..n {
                let (r0, frac) = split_floor(base - col as f64 * slope);
                if r0 >= 0 && (r0 as usize) < n {
                    f(r0 as usize * n + col, step * (1.0 - frac));
                }
                if r0 + 1 >= 0 && ((r0 + 1) as usize) < n && frac > 0.0 {
                    f((r0 + 1) as usize * n + col, step * frac);
                }
            }
        } else {
            let step = ps * len / dy.abs();
            let slope = dx / dy;
            let base = (sx + (c * ps - sy) * slope) / ps + c;
            for row in 0..n {
                let (q0, frac) = split_floor(base - row as f64 * slope);
                if q0 >= 0 && (q0 as usize) < n {
                    f(row * n + q0 as usize, step * (1.0 - frac));
                }
                if q0 + 1 >= 0 && ((q0 + 1) as usize) < n && frac > 0.0 {
                    f(row * n + (q0 + 1) as usize, step * frac);
                }
            }
        }
    }
}

/// Integer floor and fractional part, for coordinates well inside `isize`.
fn split_floor(v: f64) -> (isize, f64) {
    let mut i = v as isize;
    if (i as f64) > v {
        i -= 1;
    }
    (i, v - i as f64)
}

/// Physical unit tag of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    /// Linear attenuation in 1/cm.
    Attenuation,
    Hounsfield,
}

impl Units {
    fn name(self) -> &'static str {
        match self {
            Units::Attenuation => "attenuation",
            Units::Hounsfield => "HU",
        }
    }
}

/// Line-integral measurements, shape `(num_detectors, num_views)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    pub geometry: FanBeamGeometry,
    pub values: Tensor<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn new(geometry: FanBeamGeometry, values: Tensor<T>) -> Result<Self> {
        if values.shape() != geometry.sinogram_shape() {
            return Err(Error::shape("sinogram", values.shape(), &geometry.sinogram_shape()));
        }
        Ok(Self { geometry, values })
    }
}

/// A square image with an explicit unit tag.
#[derive(Clone, Debug, PartialEq)]
pub struct CtImage<T> {
    pub values: Tensor<T>,
    pub units: Units,
    pub pixel_spacing: f64,
}

impl<T: Real> CtImage<T> {
    pub fn attenuation(values: Tensor<T>, pixel_spacing: f64) -> Self {
        Self {
            values,
            units: Units::Attenuation,
            pixel_spacing,
        }
    }

    fn expect(&self, units: Units) -> Result<()> {
        if self.units != units {
            return Err(Error::UnitMismatch {
                expected: units.name(),
                got: self.units.name(),
            });
        }
        Ok(())
    }
}

pub fn hu_from_mu<T: Real>(img: &CtImage<T>) -> Result<CtImage<T>> {
    img.expect(Units::Attenuation)?;
    let mw = T::of(MU_WATER);
    let k = T::of(1000.0);
    Ok(CtImage {
        values: img.values.map(|m| k * (m - mw) / mw),
        units: Units::Hounsfield,
        pixel_spacing: img.pixel_spacing,
    })
}

pub fn mu_from_hu<T: Real>(img: &CtImage<T>) -> Result<CtImage<T>> {
    img.expect(Units::Hounsfield)?;
    let mw = T::of(MU_WATER);
    let k = T::of(1000.0);
    Ok(CtImage {
        values: img.values.map(|h| mw + h * mw / k),
        units: Units::Attenuation,
        pixel_spacing: img.pixel_spacing,
    })
}

fn check_planes(op: &'static str, t: &[usize], plane: [usize; 2]) -> Result<usize> {
    if t.len() < 2 || t[t.len() - 2..] != plane {
        return Err(Error::shape(op, t, &plane));
    }
    Ok(t[..t.len() - 2].iter().product())
}

/// Joseph weights of every ray, in view-major order, with the sinogram
/// index each ray writes to.
struct RayTable {
    starts: Vec<usize>,
    target: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl RayTable {
    fn new(geom: &FanBeamGeometry) -> Self {
        let (nd, nv) = (geom.num_detectors, geom.num_views);
        let mut t = RayTable {
            starts: Vec::with_capacity(nd * nv + 1),
            target: Vec::with_capacity(nd * nv),
            index: Vec::with_capacity(nd * nv * 2 * geom.image_size),
            weight: Vec::with_capacity(nd * nv * 2 * geom.image_size),
        };
        t.starts.push(0);
        for v in 0..nv {
            for d in 0..nd {
                geom.for_each_ray_weight(v, d, |idx, w| {
                    t.index.push(idx as u32);
                    t.weight.push(w);
                });
                t.starts.push(t.index.len());
                t.target.push(d * nv + v);
            }
        }
        t
    }

    fn ray(&self, r: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.starts[r], self.starts[r + 1]);
        (&self.index[lo..hi], &self.weight[lo..hi])
    }
}

/// Interleaved plane counts; each weight updates a contiguous run of
/// this many values.
const BLOCKS: [usize; 3] = [16, 4, 1];

/// Copies planes `[p0, p0 + B)` of `src` into `dst` as `(element, plane)`.
fn interleave<T: Real, const B: usize>(src: &[T], size: usize, p0: usize) -> Vec<[f64; B]> {
    let mut dst = vec![[0.0; B]; size];
    for j in 0..B {
        for (d, &v) in dst.iter_mut().zip(&src[(p0 + j) * size..][..size]) {
            d[j] = v.f64();
        }
    }
    dst
}

fn project_block<T: Real, const B: usize>(table: &RayTable, src: &[T], npix: usize, p0: usize, out: &mut [T]) {
    let nray = table.target.len();
    let x = interleave::<T, B>(src, npix, p0);
    for r in 0..nray {
        let mut acc = [0.0f64; B];
        let (idx, w) = table.ray(r);
        for (&i, &w) in idx.iter().zip(w) {
            let v = &x[i as usize];
            for j in 0..B {
                acc[j] += w * v[j];
            }
        }
        let t = table.target[r];
        for (j, &a) in acc.iter().enumerate() {
            out[(p0 + j) * nray + t] = T::of(a);
        }
    }
}

fn adjoint_block<T: Real, const B: usize>(table: &RayTable, src: &[T], npix: usize, p0: usize, out: &mut [T]) {
    let nray = table.target.len();
    let s = interleave::<T, B>(src, nray, p0);
    let mut acc = vec![[0.0f64; B]; npix];
    for r in 0..nray {
        let sv = &s[table.target[r]];
        if sv.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (idx, w) = table.ray(r);
        for (&i, &w) in idx.iter().zip(w) {
            let a = &mut acc[i as usize];
            for j in 0..B {
                a[j] += w * sv[j];
            }
        }
    }
    for j in 0..B {
        for (o, a) in out[(p0 + j) * npix..][..npix].iter_mut().zip(&acc) {
            *o = T::of(a[j]);
        }
    }
}

/// Runs `f(p0, block)` over `planes` with the largest blocks that fit.
fn for_blocks(planes: usize, mut f: impl FnMut(usize, usize)) {
    let mut p0 = 0;
    while p0 < planes {
        let b = BLOCKS.into_iter().find(|&b| b <= planes - p0).unwrap_or(1);
        f(p0, b);
        p0 += b;
    }
}

/// `P` and `Pᵀ` for one geometry, with the ray weights computed once.
pub struct Projector {
    geometry: FanBeamGeometry,
    table: RayTable,
}

impl Projector {
    pub fn new(geometry: &FanBeamGeometry) -> Self {
        Self {
            geometry: geometry.clone(),
            table: RayTable::new(geometry),
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    /// `P`: images `(..., N, N)` to sinograms `(..., detectors, views)`.
    pub fn project<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = &self.geometry;
        let planes = check_planes("forward_project", images.shape(), geom.image_shape())?;
        let nray = geom.num_detectors * geom.num_views;
        let npix = geom.image_size * geom.image_size;
        let table = &self.table;
        let mut out = vec![T::zero(); planes * nray];
        let src = images.data();
        for_blocks(planes, |p0, b| match b {
            16 => project_block::<T, 16>(table, src, npix, p0, &mut out),
            4 => project_block::<T, 4>(table, src, npix, p0, &mut out),
            _ => project_block::<T, 1>(table, src, npix, p0, &mut out),
        });
        let mut shape = images.shape()[..images.ndim() - 2].to_vec();
        shape.extend_from_slice(&geom.sinogram_shape());
        Ok(Tensor::from_parts(&shape, out))
    }

    /// `Pᵀ`: the exact transpose of [`Projector::project`].
    pub fn adjoint<T: Real>(&self, sinos: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = &self.geometry;
        let planes = check_planes("adjoint_project", sinos.shape(), geom.sinogram_shape())?;
        let npix = geom.image_size * geom.image_size;
        let table = &self.table;
        let mut out = vec![T::zero(); planes * npix];
        let src = sinos.data();
        for_blocks(planes, |p0, b| match b {
            16 => adjoint_block::<T, 16>(table, src, npix, p0, &mut out),
            4 => adjoint_block::<T, 4>(table, src, npix, p0, &mut out),
            _ => adjoint_block::<T, 1>(table, src, npix, p0, &mut out),
        });
        let mut shape = sinos.shape()[..sinos.ndim() - 2].to_vec();
        shape.extend_from_slice(&geom.image_shape());
        Ok(Tensor::from_parts(&shape, out))
    }
}

/// `P` for a single call; see [`Projector`] to reuse the ray weights.
pub fn project_planes<T: Real>(geom: &FanBeamGeometry, images: &Tensor<T>) -> Result<Tensor<T>> {
    Projector::new(geom).project(images)
}

/// `Pᵀ` for a single call.
pub fn adjoint_planes<T: Real>(geom: &FanBeamGeometry, sinos: &Tensor<T>) -> Result<Tensor<T>> {
    Projector::new(geom).adjoint(sinos)
}

pub fn forward_project<T: Real>(img: &CtImage<T>, geom: &FanBeamGeometry) -> Result<Sinogram<T>> {
    img.expect(Units::Attenuation)?;
    geom.validate()?;
    Sinogram::new(geom.clone(), project_planes(geom, &img.values)?)
}

pub fn adjoint_project<T: Real>(sino: &Sinogram<T>, geom: &FanBeamGeometry) -> Result<CtImage<T>> {
    geom.validate()?;
    Ok(CtImage::attenuation(
        adjoint_planes(geom, &sino.values)?,
        geom.pixel_spacing,
    ))
}

/// Fan-beam filtered backprojection as a fixed linear operator.
///
/// The map is `B ∘ H ∘ W`: cosine weighting `W`, Ram-Lak ramp filtering
/// `H` along the detector axis (zero-padded FFT, symmetric kernel), and a
/// pixel-driven distance-weighted backprojection `B` with linear detector
/// interpolation. Pixels outside the inscribed field-of-view circle are
/// not reconstructed (left at zero). [`FbpOperator::transpose`] applies `Wᵀ Hᵀ Bᵀ` with the
/// same coefficients.
pub struct FbpOperator<T> {
    geometry: FanBeamGeometry,
    cos_weight: Vec<T>,
    filter: Vec<Complex<T>>,
    fft: Fft<T>,
    /// Per view and pixel: lower detector index, interpolation fraction and
    /// backprojection weight. Index `usize::MAX` marks pixels off the detector.
    taps: Vec<(usize, T, T)>,
}

impl<T: Real> FbpOperator<T> {
    pub fn new(geometry: &FanBeamGeometry) -> Result<Self> {
        geometry.validate()?;
        if (geometry.angular_range - 360.0).abs() > 1e-9 {
            return Err(Error::Geometry("filtered backprojection needs a full 360 degree scan".into()));
        }
        let g = geometry;
        let nd = g.num_detectors;
        let du = g.detector_spacing;
        let d = g.source_to_center;
        let cos_weight = (0..nd)
            .map(|k| {
                let u = g.detector_coord(k);
                T::of(d / libm::sqrt(d * d + u * u))
            })
            .collect();

        let pad = (2 * nd).next_power_of_two();
        let mut kernel = vec![Complex::new(T::zero(), T::zero()); pad];
        let pi2 = core::f64::consts::PI * core::f64::consts::PI;
        let ramp = |n: usize| -> f64 {
            if n == 0 {
                1.0 / (4.0 * du * du)
            } else if n % 2 == 0 {
                0.0
            } else {
                -1.0 / ((n * n) as f64 * pi2 * du * du)
            }
        };
        // filtered(u_k) = du * sum_j q_j h(u_k - u_j) / 2, folded into the kernel
        let scale = 0.5 * du;
        kernel[0] = Complex::new(T::of(scale * ramp(0)), T::zero());
        for n in 1..pad / 2 {
            let v = T::of(scale * ramp(n));
            kernel[n] = Complex::new(v, T::zero());
            kernel[pad - n] = Complex::new(v, T::zero());
        }
        let fft = Fft::new(pad);
        fft.forward(&mut kernel);
        let inv_pad = T::of(1.0 / pad as f64);
        let filter = kernel.into_iter().map(|c| c * inv_pad).collect();

        let n = g.image_size;
        let dbeta = g.angle_step();
        let mut taps = Vec::with_capacity(g.num_views * n * n);
        let c_det = 0.5 * (nd as f64 - 1.0);
        let fov2 = g.fov_radius() * g.fov_radius();
        for v in 0..g.num_views {
            let beta = g.view_angle(v);
            let (cb, sb) = (libm::cos(beta), libm::sin(beta));
            for row in 0..n {
                for col in 0..n {
                    let (x, y) = g.pixel_center(row, col);
                    let big_u = (d - x * cb - y * sb) / d;
                    let s = (-x * sb + y * cb) / big_u;
                    let k = s / du + c_det;
                    let k0 = libm::floor(k);
                    let weight = dbeta / (big_u * big_u);
                    let inside = x * x + y * y <= fov2;
                    if inside && k0 >= 0.0 && k0 + 1.0 <= nd as f64 - 1.0 {
                        taps.push((k0 as usize, T::of(k - k0), T::of(weight)));
                    } else {
                        taps.push((usize::MAX, T::zero(), T::zero()));
                    }
                }
            }
        }
        Ok(Self {
            geometry: geometry.clone(),
            cos_weight,
            filter,
            fft,
            taps,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    /// Cosine weighting and ramp filtering of one sinogram plane, in place.
    fn filter_plane(&self, sino: &[T], out: &mut [T], apply_weight_after: bool) {
        let (nd, nv) = (self.geometry.num_detectors, self.geometry.num_views);
        let pad = self.filter.len();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); pad];
        for v in 0..nv {
            buf.fill(Complex::new(T::zero(), T::zero()));
            for k in 0..nd {
                let w = if apply_weight_after { T::one() } else { self.cos_weight[k] };
                buf[k] = Complex::new(sino[k * nv + v] * w, T::zero());
            }
            self.fft.forward(&mut buf);
            for (b, &h) in buf.iter_mut().zip(&self.filter) {
                *b = *b * h;
            }
            self.fft.inverse(&mut buf);
            for k in 0..nd {
                let w = if apply_weight_after { self.cos_weight[k] } else { T::one() };
                out[k * nv + v] = buf[k].re * w;
            }
        }
    }

    /// Reconstructs every `(detectors, views)` plane of `sinos`.
    pub fn apply(&self, sinos: &Tensor<T>) -> Result<Tensor<T>> {
        let g = &self.geometry;
        let planes = check_planes("fbp", sinos.shape(), g.sinogram_shape())?;
        let (nd, nv) = (g.num_detectors, g.num_views);
        let npix = g.image_size * g.image_size;
        let mut out = vec![T::zero(); planes * npix];
        let mut filtered = vec![T::zero(); nd * nv];
        for (sino, img) in sinos.data().chunks(nd * nv).zip(out.chunks_mut(npix)) {
            self.filter_plane(sino, &mut filtered, false);
            for v in 0..nv {
                let taps = &self.taps[v * npix..][..npix];
                for (o, &(k, frac, w)) in img.iter_mut().zip(taps) {
                    if k != usize::MAX {
                        let a = filtered[k * nv + v];
                        let b = filtered[(k + 1) * nv + v];
                        *o += w * (a + frac * (b - a));
                    }
                }
            }
        }
        let mut shape = sinos.shape()[..sinos.ndim() - 2].to_vec();
        shape.extend_from_slice(&g.image_shape());
        Ok(Tensor::from_parts(&shape, out))
    }

    /// Exact transpose of [`FbpOperator::apply`].
    pub fn transpose(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = &self.geometry;
        let planes = check_planes("fbp_transpose", images.shape(), g.image_shape())?;
        let (nd, nv) = (g.num_detectors, g.num_views);
        let npix = g.image_size * g.image_size;
        let mut out = vec![T::zero(); planes * nd * nv];
        let mut scattered = vec![T::zero(); nd * nv];
        for (img, sino) in images.data().chunks(npix).zip(out.chunks_mut(nd * nv)) {
            scattered.fill(T::zero());
            for v in 0..nv {
                let taps = &self.taps[v * npix..][..npix];
                for (&p, &(k, frac, w)) in img.iter().zip(taps) {
                    if k != usize::MAX {
                        let val = w * p;
                        scattered[k * nv + v] += val * (T::one() - frac);
                        scattered[(k + 1) * nv + v] += val * frac;
                    }
                }
            }
            self.filter_plane(&scattered, sino, true);
        }
        let mut shape = images.shape()[..images.ndim() - 2].to_vec();
        shape.extend_from_slice(&g.sinogram_shape());
        Ok(Tensor::from_parts(&shape, out))
    }
}

pub fn fbp<T: Real>(sino: &Sinogram<T>, geom: &FanBeamGeometry) -> Result<CtImage<T>> {
    let op = FbpOperator::new(geom)?;
    Ok(CtImage::attenuation(op.apply(&sino.values)?, geom.pixel_spacing))
}

/// Differentiable reconstruction layer: `(B, C, detectors, views)` →
/// `(B, C, N, N)`, backward through the exact transpose.
pub fn fbp_var<'t, T: Real>(x: Var<'t, T>, op: &Arc<FbpOperator<T>>) -> Result<Var<'t, T>> {
    let fwd = op.clone();
    let adj = op.clone();
    x.apply_linear("fbp", move |t| fwd.apply(t), move |g| adj.transpose(g))
}
