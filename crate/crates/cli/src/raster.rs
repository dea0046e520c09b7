//! 8-bit grayscale PGM export of windowed images.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};

use marnet_core::fft::log_amplitude_centered;
use marnet_core::losses::{window_normalized, WindowSpec};
use marnet_core::real::Real;
use marnet_core::tensor::Tensor;

use crate::error::{IoError, Result};

/// `round(clamp(v, 0, 1) · 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn plane_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s if s.len() > 2 && s[..s.len() - 2].iter().all(|&d| d == 1) => Ok((s[s.len() - 2], s[s.len() - 1])),
        s => Err(IoError::Format(format!("expected a single 2-D plane, got shape {s:?}"))),
    }
}

/// Quantizes a plane of `[0, 1]` values.
pub fn to_gray<T: Real>(values: &Tensor<T>) -> Result<GrayImage> {
    let (h, w) = plane_dims(values)?;
    let px = values.data().iter().map(|v| quantize(v.f64())).collect();
    GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| IoError::Format("raster size mismatch".into()))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
    std::fs::write(path, buf).map_err(|e| IoError::at(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| IoError::at(path, e))?
        .with_guessed_format()
        .map_err(|e| IoError::at(path, e))?
        .decode()
        .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

/// Writes a normalized-unit image under a display window.
pub fn export_window<T: Real>(path: &Path, normalized: &Tensor<T>, window: WindowSpec) -> Result<()> {
    write_pgm(path, &to_gray(&window_normalized(normalized, window))?)
}

/// Log-amplitude spectrum of a plane with DC at the center, and its
/// max-scaled raster.
pub fn spectrum<T: Real>(plane: &Tensor<T>) -> Result<(Tensor<T>, GrayImage)> {
    let (h, w) = plane_dims(plane)?;
    let amp = Tensor::new(&[h, w], log_amplitude_centered(plane.data(), h, w))?;
    let peak = amp.data().iter().fold(T::zero(), |m, &v| m.max(v));
    let scaled = if peak > T::zero() { amp.scale(T::one() / peak) } else { amp.clone() };
    Ok((amp, to_gray(&scaled)?))
}
