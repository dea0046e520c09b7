//! Metal-corrupted data simulation.
//!
//! Tissue attenuation is treated as energy independent; metal pixels carry
//! an energy-dependent titanium curve. A corrupted sinogram is the
//! polychromatic log measurement
//!
//! ```text
//! corrupted = P(x ⊙ (1 - m)) - ln Σ_E η(E) exp(-μ_Ti(E) P(m)) / Σ_E η(E)
//! ```
//!
//! evaluated only on rays whose metal path exceeds [`TRACE_EPS`]; every
//! other ray keeps the metal-free value `P(x)` bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::geometry::{project_planes, CtImage, FanBeamGeometry, Sinogram, Units, MU_WATER};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

/// Metal path lengths at or below this count as zero.
pub const TRACE_EPS: f64 = 1e-12;

/// Binned X-ray spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumModel {
    pub energies: Vec<f64>,
    pub eta: Vec<f64>,
    pub reference_energy: f64,
    pub photons_per_ray: f64,
}

impl SpectrumModel {
    /// 20–120 keV in 1 keV bins: Kramers bremsstrahlung shape hardened by
    /// 3 cm of water-equivalent filtration.
    pub fn standard() -> Self {
        let table = MaterialTable::standard();
        let energies: Vec<f64> = (20..=120).map(|e| e as f64).collect();
        let raw: Vec<f64> = energies
            .iter()
            .map(|&e| (120.0 - e) / e * libm::exp(-3.0 * table.mu(Material::Water, e)))
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            eta: raw.iter().map(|v| v / total).collect(),
            energies,
            reference_energy: 70.0,
            photons_per_ray: 2e7,
        }
    }

    /// All fluence in a single bin.
    pub fn monoenergetic(energy: f64) -> Self {
        Self {
            energies: vec![energy],
            eta: vec![1.0],
            reference_energy: energy,
            photons_per_ray: 2e7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies.is_empty() || self.energies.len() != self.eta.len() {
            return Err(Error::invalid("spectrum", "energies and weights must be non-empty and paired"));
        }
        if self.energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("spectrum", "energies must be strictly increasing"));
        }
        if self.eta.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("spectrum", "weights must be non-negative"));
        }
        let sum: f64 = self.eta.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("spectrum", format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Material {
    Water,
    Bone,
    Titanium,
}

/// Linear attenuation curves (1/cm) on a shared energy grid, interpolated
/// log-log between knots.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialTable {
    knots_kev: Vec<f64>,
    water: Vec<f64>,
    bone: Vec<f64>,
    titanium: Vec<f64>,
}

impl MaterialTable {
    pub fn standard() -> Self {
        Self {
            knots_kev: vec![20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0, 150.0],
            water: vec![0.809, 0.376, 0.268, 0.227, 0.206, 0.184, 0.171, 0.150],
            bone: vec![7.7, 2.55, 1.28, 0.81, 0.60, 0.43, 0.357, 0.285],
            titanium: vec![71.6, 22.4, 9.9, 5.4, 3.4, 1.82, 1.22, 0.74],
        }
    }

    pub fn mu(&self, material: Material, energy: f64) -> f64 {
        let curve = match material {
            Material::Water => &self.water,
            Material::Bone => &self.bone,
            Material::Titanium => &self.titanium,
        };
        let k = &self.knots_kev;
        let last = k.len() - 1;
        let i = match k.iter().position(|&e| e > energy) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => last - 1,
        };
        let t = (libm::log(energy) - libm::log(k[i])) / (libm::log(k[i + 1]) - libm::log(k[i]));
        libm::exp(libm::log(curve[i]) + t * (libm::log(curve[i + 1]) - libm::log(curve[i])))
    }

    pub fn sample(&self, material: Material, spectrum: &SpectrumModel) -> Vec<f64> {
        spectrum.energies.iter().map(|&e| self.mu(material, e)).collect()
    }
}

/// Binary image-domain metal map.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalMask<T> {
    values: Tensor<T>,
}

impl<T: Real> MetalMask<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] != values.shape()[1] {
            return Err(Error::invalid("metal_mask", "mask must be a square 2-D grid"));
        }
        if values.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("metal_mask", "mask values must be 0 or 1"));
        }
        Ok(Self { values })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            values: Tensor::zeros(&[size, size]),
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn pixel_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == T::one()).count()
    }
}

/// Binary sinogram marking rays that cross metal.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalTrace<T> {
    values: Tensor<T>,
}

impl<T: Real> MetalTrace<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == T::one()).count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.values.shape() == other.values.shape()
            && self
                .values
                .data()
                .iter()
                .zip(other.values.data())
                .all(|(&a, &b)| a <= b)
    }
}

/// Raw forward projection of the mask (metal path length per ray in cm).
pub fn mask_projection<T: Real>(mask: &MetalMask<T>, geom: &FanBeamGeometry) -> Result<Sinogram<T>> {
    geom.validate()?;
    Sinogram::new(geom.clone(), project_planes(geom, &mask.values)?)
}

pub fn compute_trace<T: Real>(mask: &MetalMask<T>, geom: &FanBeamGeometry) -> Result<MetalTrace<T>> {
    let proj = mask_projection(mask, geom)?;
    Ok(trace_from_projection(&proj.values))
}

pub fn trace_from_projection<T: Real>(projection: &Tensor<T>) -> MetalTrace<T> {
    let eps = T::of(TRACE_EPS);
    MetalTrace {
        values: projection.map(|v| if v > eps { T::one() } else { T::zero() }),
    }
}

/// Binary `k × k` max filter over the last two axes with zero padding.
pub fn dilate<T: Real>(grid: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k % 2 == 0 {
        return Err(Error::invalid("dilate", format!("kernel size must be odd, got {k}")));
    }
    if grid.ndim() < 2 {
        return Err(Error::invalid("dilate", "expected at least two dimensions"));
    }
    let nd = grid.ndim();
    let (h, w) = (grid.shape()[nd - 2], grid.shape()[nd - 1]);
    let r = k / 2;
    let mut out = vec![T::zero(); grid.len()];
    let mut rows = vec![T::zero(); h * w];
    for (src, dst) in grid.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        // separable: horizontal then vertical running max
        for i in 0..h {
            for j in 0..w {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(w - 1);
                rows[i * w + j] = src[i * w + lo..=i * w + hi]
                    .iter()
                    .fold(T::zero(), |m, &v| m.max(v));
            }
        }
        for i in 0..h {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(h - 1);
            for j in 0..w {
                dst[i * w + j] = (lo..=hi).fold(T::zero(), |m, ii| m.max(rows[ii * w + j]));
            }
        }
    }
    Ok(Tensor::from_parts(grid.shape(), out))
}

pub fn dilate_mask<T: Real>(mask: &MetalMask<T>, k: usize) -> Result<MetalMask<T>> {
    Ok(MetalMask {
        values: dilate(&mask.values, k)?,
    })
}

/// Phantom family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    Disks,
    Ellipses,
    LungLike,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 3] = [PhantomKind::Disks, PhantomKind::Ellipses, PhantomKind::LungLike];
}

/// Filled ellipse in normalized coordinates (image spans `[-1, 1]²`, `y` up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    /// Attenuation in 1/cm written into the region (later shapes overwrite).
    pub mu: f64,
    pub bone: bool,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Normalized coordinates of a pixel centre.
pub fn pixel_coords(size: usize, row: usize, col: usize) -> (f64, f64) {
    let c = 0.5 * (size as f64 - 1.0);
    let half = 0.5 * size as f64;
    ((col as f64 - c) / half, (c - row as f64) / half)
}

pub fn rasterize(size: usize, shapes: &[Ellipse]) -> (Tensor<f64>, Tensor<f64>) {
    let mut mu = vec![0.0; size * size];
    let mut bone = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            let (x, y) = pixel_coords(size, row, col);
            for s in shapes {
                if s.contains(x, y) {
                    mu[row * size + col] = s.mu;
                    bone[row * size + col] = if s.bone { 1.0 } else { 0.0 };
                }
            }
        }
    }
    (
        Tensor::from_parts(&[size, size], mu),
        Tensor::from_parts(&[size, size], bone),
    )
}

/// Analytic description of a phantom for the given seed.
pub fn phantom_shapes(seed: u64, kind: PhantomKind) -> Vec<Ellipse> {
    let mut r = rng::seeded(seed);
    let w = MU_WATER;
    let mut shapes = Vec::new();
    let tissue = |r: &mut rng::Rng, lo: f64, hi: f64| w * r.random_range(lo..hi);
    let body_a = r.random_range(0.62..0.8);
    let body_b = match kind {
        PhantomKind::Disks => body_a,
        _ => body_a * r.random_range(0.7..0.9),
    };
    let body = Ellipse {
        cx: r.random_range(-0.04..0.04),
        cy: r.random_range(-0.04..0.04),
        a: body_a,
        b: body_b,
        angle: 0.0,
        mu: tissue(&mut r, 0.97, 1.03),
        bone: false,
    };
    shapes.push(body);
    let inside = |r: &mut rng::Rng, scale: f64| {
        let t = r.random_range(0.0..core::f64::consts::TAU);
        let rad = scale * libm::sqrt(r.random_range(0.0..1.0));
        (body.cx + rad * body.a * libm::cos(t), body.cy + rad * body.b * libm::sin(t))
    };
    match kind {
        PhantomKind::Disks => {
            for _ in 0..r.random_range(3..6) {
                let (cx, cy) = inside(&mut r, 0.6);
                let rad = r.random_range(0.05..0.14);
                let bone = r.random_bool(0.35);
                let mu = if bone { tissue(&mut r, 1.8, 2.6) } else { tissue(&mut r, 0.9, 1.12) };
                shapes.push(Ellipse { cx, cy, a: rad, b: rad, angle: 0.0, mu, bone });
            }
        }
        PhantomKind::Ellipses => {
            // spine-like ring with marrow
            let (sx, sy) = (body.cx, body.cy - 0.55 * body.b);
            let rad = r.random_range(0.09..0.13);
            shapes.push(Ellipse { cx: sx, cy: sy, a: rad, b: rad * 0.85, angle: 0.0, mu: tissue(&mut r, 2.2, 2.7), bone: true });
            shapes.push(Ellipse { cx: sx, cy: sy, a: rad * 0.6, b: rad * 0.5, angle: 0.0, mu: tissue(&mut r, 1.1, 1.3), bone: false });
            for _ in 0..r.random_range(3..6) {
                let (cx, cy) = inside(&mut r, 0.55);
                let a = r.random_range(0.06..0.2);
                let b = a * r.random_range(0.4..1.0);
                let angle = r.random_range(0.0..core::f64::consts::PI);
                shapes.push(Ellipse { cx, cy, a, b, angle, mu: tissue(&mut r, 0.88, 1.15), bone: false });
            }
        }
        PhantomKind::LungLike => {
            for side in [-1.0, 1.0] {
                let cx = body.cx + side * body.a * r.random_range(0.42..0.5);
                let lung = Ellipse {
                    cx,
                    cy: body.cy + r.random_range(0.0..0.08),
                    a: body.a * r.random_range(0.3..0.36),
                    b: body.b * r.random_range(0.55..0.7),
                    angle: side * r.random_range(0.0..0.2),
                    mu: tissue(&mut r, 0.18, 0.3),
                    bone: false,
                };
                shapes.push(lung);
                for _ in 0..r.random_range(2..5) {
                    let t = r.random_range(0.0..core::f64::consts::TAU);
                    let rad = 0.6 * libm::sqrt(r.random_range(0.0..1.0));
                    let v = r.random_range(0.012..0.03);
                    shapes.push(Ellipse {
                        cx: lung.cx + rad * lung.a * libm::cos(t),
                        cy: lung.cy + rad * lung.b * libm::sin(t),
                        a: v,
                        b: v,
                        angle: 0.0,
                        mu: tissue(&mut r, 0.95, 1.1),
                        bone: false,
                    });
                }
            }
            let heart = r.random_range(0.14..0.2);
            shapes.push(Ellipse { cx: body.cx + 0.08, cy: body.cy + 0.05, a: heart, b: heart * 0.85, angle: 0.4, mu: tissue(&mut r, 1.02, 1.08), bone: false });
            let spine = r.random_range(0.08..0.11);
            shapes.push(Ellipse { cx: body.cx, cy: body.cy - 0.7 * body.b, a: spine, b: spine * 0.85, angle: 0.0, mu: tissue(&mut r, 2.2, 2.7), bone: true });
        }
    }
    shapes
}

/// A generated phantom: attenuation image plus binary bone map.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom<T> {
    pub image: CtImage<T>,
    pub bone: Tensor<T>,
}

pub fn make_phantom<T: Real>(seed: u64, geom: &FanBeamGeometry, kind: PhantomKind) -> Phantom<T> {
    let (mu, bone) = rasterize(geom.image_size, &phantom_shapes(seed, kind));
    Phantom {
        image: CtImage::attenuation(mu.cast(), geom.pixel_spacing),
        bone: bone.cast(),
    }
}

/// Metal insert shapes, lengths in pixels at a 64-pixel image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetalShape {
    Disk { radius: f64 },
    /// Rectangle: rods are thin, plates are wide.
    Bar { length: f64, width: f64 },
    Pair { radius: f64, separation: f64 },
}

impl MetalShape {
    /// Nominal area in pixels at the 64-pixel reference size.
    pub fn nominal_area(&self) -> f64 {
        match *self {
            MetalShape::Disk { radius } => core::f64::consts::PI * radius * radius,
            MetalShape::Bar { length, width } => length * width,
            MetalShape::Pair { radius, .. } => 2.0 * core::f64::consts::PI * radius * radius,
        }
    }

    /// Size bin 0 (smallest) to 4 (largest).
    pub fn area_bin(&self) -> usize {
        const EDGES: [f64; 4] = [5.0, 10.0, 20.0, 35.0];
        EDGES.iter().filter(|&&e| self.nominal_area() >= e).count()
    }

    /// Pixel-centre rasterization at `(cx, cy)` (pixels from the image
    /// centre, `y` up), rotated by `angle`. Never empty: the pixel nearest
    /// to each component centre is always set.
    pub fn rasterize(&self, size: usize, cx: f64, cy: f64, angle: f64) -> Tensor<f64> {
        let scale = size as f64 / 64.0;
        let c = 0.5 * (size as f64 - 1.0);
        let (s, co) = (libm::sin(angle), libm::cos(angle));
        let centres: Vec<(f64, f64)> = match *self {
            MetalShape::Pair { separation, .. } => {
                let h = 0.5 * separation * scale;
                vec![(cx + h * co, cy + h * s), (cx - h * co, cy - h * s)]
            }
            _ => vec![(cx, cy)],
        };
        let inside = |x: f64, y: f64| -> bool {
            centres.iter().any(|&(px, py)| {
                let (dx, dy) = (x - px, y - py);
                let u = co * dx + s * dy;
                let v = -s * dx + co * dy;
                match *self {
                    MetalShape::Disk { radius } | MetalShape::Pair { radius, .. } => {
                        let r = radius * scale;
                        u * u + v * v <= r * r
                    }
                    MetalShape::Bar { length, width } => {
                        u.abs() <= 0.5 * length * scale && v.abs() <= 0.5 * width * scale
                    }
                }
            })
        };
        let mut out = Tensor::from_fn(&[size, size], |i| {
            let (row, col) = (i / size, i % size);
            if inside(col as f64 - c, c - row as f64) {
                1.0
            } else {
                0.0
            }
        });
        for &(px, py) in &centres {
            let col = libm::round(px + c).clamp(0.0, size as f64 - 1.0) as usize;
            let row = libm::round(c - py).clamp(0.0, size as f64 - 1.0) as usize;
            out.data_mut()[row * size + col] = 1.0;
        }
        out
    }
}

/// The twelve-entry desk-scale library ordered by nominal area.
pub fn metal_library() -> Vec<MetalShape> {
    use MetalShape::*;
    let mut lib = vec![
        Disk { radius: 1.0 },
        Bar { length: 6.0, width: 1.0 },
        Disk { radius: 1.5 },
        Pair { radius: 1.2, separation: 8.0 },
        Disk { radius: 2.0 },
        Bar { length: 10.0, width: 1.5 },
        Disk { radius: 2.5 },
        Bar { length: 8.0, width: 3.0 },
        Pair { radius: 2.0, separation: 12.0 },
        Disk { radius: 3.2 },
        Bar { length: 12.0, width: 4.0 },
        Disk { radius: 4.0 },
    ];
    lib.sort_by(|a, b| a.nominal_area().total_cmp(&b.nominal_area()));
    lib
}

/// Tissue image plus titanium inserts.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialImage<T> {
    pub tissue: CtImage<T>,
    pub mask: MetalMask<T>,
    pub metal: Material,
}

pub fn implant_metal<T: Real>(img: &CtImage<T>, mask: &MetalMask<T>) -> Result<MaterialImage<T>> {
    if img.units != Units::Attenuation {
        return Err(Error::UnitMismatch {
            expected: "attenuation",
            got: "HU",
        });
    }
    if img.values.shape() != mask.values.shape() {
        return Err(Error::shape("implant_metal", img.values.shape(), mask.values.shape()));
    }
    Ok(MaterialImage {
        tissue: img.clone(),
        mask: mask.clone(),
        metal: Material::Titanium,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Off,
    Poisson,
}

/// Polychromatic metal term `-ln Σ η exp(-μ(E) L) / Σ η` for path length `L`.
pub fn metal_log_attenuation(mu: &[f64], eta: &[f64], length: f64) -> f64 {
    let total: f64 = eta.iter().sum();
    let transmitted: f64 = mu.iter().zip(eta).map(|(&m, &w)| w * libm::exp(-m * length)).sum();
    -libm::log(transmitted / total)
}

/// Poisson-sampled log measurement of a ray with noise-free value `s`.
pub fn noisy_measurement(s: f64, photons: f64, r: &mut rng::Rng) -> Result<f64> {
    let lambda = photons * libm::exp(-s);
    let counts = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| Error::invalid("polychromatic_project", format!("{e:?}")))?
            .sample(r)
    } else {
        0.0
    };
    Ok(-libm::log(counts.max(1.0) / photons))
}

/// Metal-corrupted sinogram of `mimg`.
pub fn polychromatic_project<T: Real>(
    mimg: &MaterialImage<T>,
    geom: &FanBeamGeometry,
    spectrum: &SpectrumModel,
    table: &MaterialTable,
    noise: NoiseMode,
    seed: u64,
) -> Result<Sinogram<T>> {
    spectrum.validate()?;
    let tissue = mimg.tissue.values.cast::<f64>();
    let mask = mimg.mask.values.cast::<f64>();
    let n = geom.image_size;
    let under = tissue.mul(&mask)?;
    let stacked: Vec<f64> = [&tissue, &mask, &under].iter().flat_map(|t| t.data().iter().copied()).collect();
    let stacked = Tensor::from_parts(&[3, n, n], stacked);
    let proj = project_planes(geom, &stacked)?;
    let [nd, nv] = geom.sinogram_shape();
    let plane = |i: usize| proj.data()[i * nd * nv..(i + 1) * nd * nv].to_vec();
    let (mut out, metal_len, under) = (plane(0), plane(1), plane(2));
    let mu_metal = table.sample(mimg.metal, spectrum);
    if metal_len.iter().any(|&l| l > TRACE_EPS) {
        for ((s, &l), &u) in out.iter_mut().zip(&metal_len).zip(&under) {
            if l > TRACE_EPS {
                *s = *s - u + metal_log_attenuation(&mu_metal, &spectrum.eta, l);
            }
        }
    }
    if noise == NoiseMode::Poisson {
        let mut r = rng::seeded(seed);
        for s in out.iter_mut() {
            *s = noisy_measurement(*s, spectrum.photons_per_ray, &mut r)?;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "polychromatic_project" });
    }
    Sinogram::new(
        geom.clone(),
        Tensor::from_parts(&geom.sinogram_shape(), out).cast(),
    )
}

/// One paired training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample<T> {
    pub seed: u64,
    pub metal_bin: usize,
    pub corrupted: Tensor<T>,
    pub trace: Tensor<T>,
    pub mask_projection: Tensor<T>,
    pub clean_sinogram: Tensor<T>,
    pub clean_image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> DataSample<T> {
    pub fn cast<U: Real>(&self) -> DataSample<U> {
        DataSample {
            seed: self.seed,
            metal_bin: self.metal_bin,
            corrupted: self.corrupted.cast(),
            trace: self.trace.cast(),
            mask_projection: self.mask_projection.cast(),
            clean_sinogram: self.clean_sinogram.cast(),
            clean_image: self.clean_image.cast(),
            mask: self.mask.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub spectrum: SpectrumModel,
    pub materials: MaterialTable,
    pub noise: NoiseMode,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            spectrum: SpectrumModel::standard(),
            materials: MaterialTable::standard(),
            noise: NoiseMode::Poisson,
        }
    }
}

/// Generates one sample from its own seed.
pub fn make_sample<T: Real>(
    seed: u64,
    geom: &FanBeamGeometry,
    sim: &SimulationConfig,
    library: &[MetalShape],
) -> Result<DataSample<T>> {
    if library.is_empty() {
        return Err(Error::invalid("make_dataset", "metal library is empty"));
    }
    let mut r = rng::seeded(seed);
    let kind = PhantomKind::ALL[r.random_range(0..3)];
    let phantom = make_phantom::<f64>(rng::derive_seed(seed, 1), geom, kind);
    let shape = library[r.random_range(0..library.len())];
    let n = geom.image_size;
    // place inside the central part of the field of view
    let reach = 0.3 * n as f64;
    let t = r.random_range(0.0..core::f64::consts::TAU);
    let rad = reach * libm::sqrt(r.random_range(0.0..1.0));
    let angle = r.random_range(0.0..core::f64::consts::PI);
    let mask = MetalMask::new(shape.rasterize(n, rad * libm::cos(t), rad * libm::sin(t), angle))?;
    let mimg = implant_metal(&phantom.image, &mask)?;
    let corrupted = polychromatic_project(&mimg, geom, &sim.spectrum, &sim.materials, sim.noise, rng::derive_seed(seed, 2))?;
    let proj = mask_projection(&mask, geom)?;
    let trace = trace_from_projection(&proj.values);
    let clean_sinogram = project_planes(geom, &phantom.image.values)?;
    Ok(DataSample {
        seed,
        metal_bin: shape.area_bin(),
        corrupted: corrupted.values.cast(),
        trace: trace.values.cast(),
        mask_projection: proj.values.cast(),
        clean_sinogram: clean_sinogram.cast(),
        clean_image: phantom.image.values.cast(),
        mask: mask.values.cast(),
    })
}

/// `n` samples with per-sample seeds derived from `seed`.
pub fn make_dataset<T: Real>(
    n: usize,
    geom: &FanBeamGeometry,
    sim: &SimulationConfig,
    library: &[MetalShape],
    seed: u64,
) -> Result<Vec<DataSample<T>>> {
    geom.validate()?;
    (0..n)
        .map(|i| make_sample(rng::derive_seed(seed, i as u64), geom, sim, library))
        .collect()
}
